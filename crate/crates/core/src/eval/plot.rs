use std::fmt::Write as _;

use super::{ScoreKind, ScoreReport, SplitTag};
use crate::synthdata::Difficulty;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;
const BINS: usize = 40;

fn histogram(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; BINS];
    if values.is_empty() {
        return h;
    }
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for v in values {
        let b = (((v - lo) / span) * BINS as f64).floor() as isize;
        h[b.clamp(0, BINS as isize - 1) as usize] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Normalized score histograms of known-test rows and each unknown split,
/// drawn as step outlines in one SVG. Output depends only on the report.
pub fn score_histogram_svg(report: &ScoreReport, kind: ScoreKind) -> String {
    let groups: Vec<(&str, &str, Vec<f64>)> = [
        (SplitTag::KnownTest, "#1f77b4"),
        (SplitTag::Unknown(Difficulty::Easy), "#2ca02c"),
        (SplitTag::Unknown(Difficulty::Medium), "#ff7f0e"),
        (SplitTag::Unknown(Difficulty::Hard), "#d62728"),
    ]
    .into_iter()
    .map(|(tag, color)| {
        let v = report
            .rows
            .iter()
            .filter(|r| r.split == tag)
            .map(|r| r.score(kind))
            .collect();
        (tag.as_str(), color, v)
    })
    .collect();
    let all = groups.iter().flat_map(|g| g.2.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let hists: Vec<Vec<f64>> = groups.iter().map(|g| histogram(&g.2, lo, hi)).collect();
    let peak = hists
        .iter()
        .flatten()
        .copied()
        .fold(0.0, f64::max)
        .max(1e-12);

    let pw = WIDTH - 2.0 * MARGIN;
    let ph = HEIGHT - 2.0 * MARGIN;
    let bw = pw / BINS as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        HEIGHT - MARGIN,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN
    );
    for ((name, color, _), h) in groups.iter().zip(&hists) {
        let mut pts = format!("{:.2},{:.2}", MARGIN, HEIGHT - MARGIN);
        for (b, c) in h.iter().enumerate() {
            let y = HEIGHT - MARGIN - ph * c / peak;
            let x0 = MARGIN + b as f64 * bw;
            let _ = write!(pts, " {:.2},{:.2} {:.2},{:.2}", x0, y, x0 + bw, y);
        }
        let _ = write!(pts, " {:.2},{:.2}", WIDTH - MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            svg,
            r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"><title>{name}</title></polyline>"#
        );
    }
    for (i, (name, color, _)) in groups.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{y:.2}" font-size="11" fill="{color}">{name}</text>"#,
            WIDTH - MARGIN - 80.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.2}" font-size="11">{} [{lo:.4}, {hi:.4}]</text>"#,
        HEIGHT - 10.0,
        kind.as_str()
    );
    svg.push_str("</svg>\n");
    svg
}
