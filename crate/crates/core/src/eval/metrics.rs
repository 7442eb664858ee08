//! Rank metrics where a higher score means "more likely unknown".

use crate::error::{ensure, Result};

fn check(known: &[f64], unknown: &[f64]) -> Result<()> {
    ensure!(!known.is_empty(), "no known-class scores");
    ensure!(!unknown.is_empty(), "no unknown-class scores");
    ensure!(
        known.iter().chain(unknown).all(|v| !v.is_nan()),
        "scores contain NaN"
    );
    Ok(())
}

/// Tagged scores sorted ascending; `true` marks an unknown sample.
fn merged(known: &[f64], unknown: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, false))
        .chain(unknown.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    all
}

/// `P(s_unknown > s_known) + ½ P(tie)` from mid-ranks.
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    check(known, unknown)?;
    let all = merged(known, unknown);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|t| t.1).count() as f64;
        i = j;
    }
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    Ok((rank_sum - nu * (nu + 1.0) / 2.0) / (nk * nu))
}

/// Average precision with unknown as the positive class: precision summed
/// over recall increments, thresholds at each distinct score.
pub fn aupr(known: &[f64], unknown: &[f64]) -> Result<f64> {
    check(known, unknown)?;
    let mut all = merged(known, unknown);
    all.reverse();
    let nu = unknown.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / nu;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Area under correct-classification rate against false-positive rate,
/// accepting a sample when its score is at most the threshold.
/// `known_correct[i]` says whether known sample `i` was classified right.
pub fn oscr_scores(known: &[f64], known_correct: &[bool], unknown: &[f64]) -> Result<f64> {
    check(known, unknown)?;
    ensure!(
        known.len() == known_correct.len(),
        "one correctness flag per known sample required"
    );
    let mut all: Vec<(f64, Option<bool>)> = known
        .iter()
        .zip(known_correct)
        .map(|(&s, &c)| (s, Some(c)))
        .chain(unknown.iter().map(|&s| (s, None)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // integer counts; the trapezoid sum is scaled by 2·nk·nu at the end
    let (mut ccr, mut fpr) = (0u64, 0u64);
    let mut area2: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let (mut c, mut f) = (ccr, fpr);
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            match all[j].1 {
                Some(true) => c += 1,
                Some(false) => {}
                None => f += 1,
            }
            j += 1;
        }
        area2 += (f - fpr) * (c + ccr);
        ccr = c;
        fpr = f;
        i = j;
    }
    Ok(area2 as f64 / (2 * known.len() * unknown.len()) as f64)
}
