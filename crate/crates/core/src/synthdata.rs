//! Synthetic attribute-labelled feature datasets with open-set splits.
//!
//! Classes are grouped: each group has a random binary attribute
//! prototype, and every class flips a few of its group's bits. Features are
//! an orthonormal linear embedding of the attribute vector plus isotropic
//! Gaussian noise, so feature-space distance between class means is
//! `scale * sqrt(hamming distance)`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::numkit::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeBank {
    /// One 0/1 row per class.
    pub attrs: Vec<Vec<u8>>,
    /// Coarse group id per class.
    pub groups: Vec<usize>,
}

impl AttributeBank {
    pub fn classes(&self) -> usize {
        self.attrs.len()
    }

    pub fn attr_count(&self) -> usize {
        self.attrs.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub a: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Known / unknown partition of bank classes (bank indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSplit {
    pub known: Vec<usize>,
    pub easy: Vec<usize>,
    pub medium: Vec<usize>,
    pub hard: Vec<usize>,
}

impl OpenSplit {
    pub fn unknown(&self, d: Difficulty) -> &[usize] {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Medium => &self.medium,
            Difficulty::Hard => &self.hard,
        }
    }

    pub fn difficulty_of(&self, class: usize) -> Option<Difficulty> {
        Difficulty::ALL
            .into_iter()
            .find(|&d| self.unknown(d).contains(&class))
    }
}

/// Number of bits each class flips relative to its group prototype.
fn flips_per_class(m: usize) -> usize {
    (m / 8).max(1)
}

pub fn make_attribute_bank(
    classes: usize,
    attrs: usize,
    groups: usize,
    seed: u64,
) -> Result<AttributeBank> {
    ensure!(groups >= 1, "need at least one group");
    ensure!(attrs >= 8, "need at least 8 attributes, got {attrs}");
    ensure!(
        classes >= 2 * groups,
        "need at least two classes per group ({classes} classes, {groups} groups)"
    );
    ensure!(
        attrs >= 63 || (classes as u128) < (1u128 << attrs),
        "{classes} distinct classes impossible with {attrs} attributes"
    );
    let mut rng = Rng::new(seed).child_indexed(0xBA4C);
    let flips = flips_per_class(attrs);
    let protos: Vec<Vec<u8>> = (0..groups)
        .map(|_| (0..attrs).map(|_| (rng.uniform() < 0.5) as u8).collect())
        .collect();

    let mut rows: Vec<Vec<u8>> = Vec::with_capacity(classes);
    let mut group_ids = Vec::with_capacity(classes);
    for c in 0..classes {
        let g = c % groups;
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::invalid(format!(
                    "could not draw a distinct attribute row for class {c}"
                )));
            }
            let mut row = protos[g].clone();
            let mut idx: Vec<usize> = (0..attrs).collect();
            rng.shuffle(&mut idx);
            for &i in &idx[..flips] {
                row[i] ^= 1;
            }
            if row.iter().any(|&b| b == 1) && !rows.contains(&row) {
                rows.push(row);
                group_ids.push(g);
                break;
            }
        }
    }
    Ok(AttributeBank {
        attrs: rows,
        groups: group_ids,
    })
}

/// Cosine similarity of two 0/1 vectors (0 if either is all-zero).
pub fn attribute_cosine(a: &[u8], b: &[u8]) -> f64 {
    let dot = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x == 1 && **y == 1)
        .count() as f64;
    let na = a.iter().filter(|&&x| x == 1).count() as f64;
    let nb = b.iter().filter(|&&x| x == 1).count() as f64;
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// `dim × attrs` embedding with orthonormal columns (Gram-Schmidt on
/// Gaussian columns).
pub fn attribute_embedding(attrs: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    ensure!(
        dim >= attrs,
        "feature dimension {dim} must be at least the attribute count {attrs}"
    );
    let mut rng = Rng::new(seed).child_indexed(0xE3B);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(attrs);
    while cols.len() < attrs {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            cols.push(v);
        }
    }
    Ok(cols)
}

/// Class mean `scale * E a` for every bank row.
pub fn class_prototypes(
    bank: &AttributeBank,
    dim: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let emb = attribute_embedding(bank.attr_count(), dim, seed)?;
    Ok(bank
        .attrs
        .iter()
        .map(|a| {
            let mut p = vec![0.0; dim];
            for (bit, col) in a.iter().zip(&emb) {
                if *bit == 1 {
                    p.iter_mut().zip(col).for_each(|(x, c)| *x += scale * c);
                }
            }
            p
        })
        .collect())
}

/// Default distance unit between prototypes.
pub const PROTOTYPE_SCALE: f64 = 1.0;

/// `n_per_class` noisy samples per bank class, grouped by class; `y` is the
/// bank class index.
pub fn generate_dataset(
    bank: &AttributeBank,
    n_per_class: usize,
    dim: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    generate_dataset_with(
        bank,
        n_per_class,
        dim,
        noise_scale,
        PROTOTYPE_SCALE,
        seed,
        Execution::default(),
    )
}

pub fn generate_dataset_with(
    bank: &AttributeBank,
    n_per_class: usize,
    dim: usize,
    noise_scale: f64,
    prototype_scale: f64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<LabeledSample>> {
    ensure!(n_per_class >= 1, "n_per_class must be at least 1");
    ensure!(
        noise_scale >= 0.0 && noise_scale.is_finite(),
        "noise scale must be finite and non-negative"
    );
    let protos = class_prototypes(bank, dim, prototype_scale, seed)?;
    let root = Rng::new(seed);
    let per_class = exec.map(bank.classes(), |c| {
        let mut rng = root.child_indexed(1000 + c as u64);
        (0..n_per_class)
            .map(|_| LabeledSample {
                x: protos[c]
                    .iter()
                    .map(|p| p + noise_scale * rng.normal())
                    .collect(),
                y: c,
                a: bank.attrs[c].clone(),
            })
            .collect::<Vec<_>>()
    });
    Ok(per_class.into_iter().flatten().collect())
}

/// Partition with a given known set; unknown classes ranked by maximum
/// attribute cosine to any known class and cut into thirds (top → hard).
/// Thirds are sized as evenly as possible, extra classes going to hard
/// then medium.
pub fn split_with_known(bank: &AttributeBank, known: Vec<usize>) -> Result<OpenSplit> {
    let k_total = bank.classes();
    ensure!(!known.is_empty(), "need at least one known class");
    ensure!(
        known.iter().all(|&k| k < k_total),
        "known class out of range"
    );
    let mut seen = vec![false; k_total];
    for &k in &known {
        ensure!(!seen[k], "known class {k} listed twice");
        seen[k] = true;
    }
    let mut ranked: Vec<(usize, f64)> = (0..k_total)
        .filter(|c| !seen[*c])
        .map(|c| {
            let s = known
                .iter()
                .map(|&k| attribute_cosine(&bank.attrs[c], &bank.attrs[k]))
                .fold(f64::NEG_INFINITY, f64::max);
            (c, s)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = ranked.len();
    let base = n / 3;
    let extra = n % 3;
    let n_hard = base + (extra > 0) as usize;
    let n_medium = base + (extra > 1) as usize;
    let ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
    Ok(OpenSplit {
        known,
        hard: ids[..n_hard].to_vec(),
        medium: ids[n_hard..n_hard + n_medium].to_vec(),
        easy: ids[n_hard + n_medium..].to_vec(),
    })
}

/// Random known set of size `n_known`, then [`split_with_known`].
pub fn split_openset(bank: &AttributeBank, n_known: usize, seed: u64) -> Result<OpenSplit> {
    ensure!(n_known >= 1, "need at least one known class");
    ensure!(
        bank.classes() >= 2 * n_known,
        "bank has {} classes; need at least {} for {n_known} known",
        bank.classes(),
        2 * n_known
    );
    let mut ids: Vec<usize> = (0..bank.classes()).collect();
    Rng::new(seed).child_indexed(0x5B1).shuffle(&mut ids);
    let mut known = ids[..n_known].to_vec();
    known.sort_unstable();
    split_with_known(bank, known)
}

/// Samples in the CSV layout `f0..f{D-1},label,a0..a{M-1}`; features are
/// written with 17 significant digits.
pub fn write_csv(samples: &[LabeledSample], path: &Path) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let m = samples.first().map_or(0, |s| s.a.len());
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..d)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .chain((0..m).map(|i| format!("a{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for s in samples {
        ensure!(
            s.x.len() == d && s.a.len() == m,
            "samples have inconsistent widths"
        );
        line.clear();
        for v in &s.x {
            line.push_str(&format!("{v:.16e},"));
        }
        line.push_str(&s.y.to_string());
        for a in &s.a {
            line.push(',');
            line.push(if *a == 1 { '1' } else { '0' });
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Vec<LabeledSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or(Error::Parse {
            line: 1,
            msg: "header has no `label` column".into(),
        })?;
    for (i, h) in header.iter().enumerate() {
        let ok = if i < label_col {
            h == format!("f{i}")
        } else if i > label_col {
            h == format!("a{}", i - label_col - 1)
        } else {
            true
        };
        if !ok {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected column name `{h}`"),
            });
        }
    }
    let width = header.len();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |msg: String| Error::Parse { line, msg };
        if rec.len() != width {
            return Err(perr(format!(
                "expected {width} columns, found {}",
                rec.len()
            )));
        }
        let mut x = Vec::with_capacity(label_col);
        for field in rec.iter().take(label_col) {
            let v: f64 = field
                .parse()
                .map_err(|_| perr(format!("bad feature value `{field}`")))?;
            x.push(v);
        }
        let y: usize = rec[label_col]
            .parse()
            .map_err(|_| perr(format!("bad label `{}`", &rec[label_col])))?;
        let mut a = Vec::with_capacity(width - label_col - 1);
        for field in rec.iter().skip(label_col + 1) {
            match field {
                "0" => a.push(0),
                "1" => a.push(1),
                other => return Err(perr(format!("attribute must be 0 or 1, got `{other}`"))),
            }
        }
        out.push(LabeledSample { x, y, a });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Generation parameters for a complete open-set dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub known: usize,
    pub attrs: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
    pub groups: usize,
    pub prototype_scale: f64,
    /// Fraction of each known class used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 16,
            known: 8,
            attrs: 16,
            dim: 32,
            per_class: 128,
            noise: 0.3,
            groups: 4,
            prototype_scale: PROTOTYPE_SCALE,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

/// Train / known-test / unknown samples with labels remapped: known bank
/// classes get labels `0..K` in `split.known` order, unknown classes get
/// `K..` in `unknown_classes` order.
#[derive(Debug, Clone)]
pub struct OpenSetData {
    pub config: SynthConfig,
    pub bank: AttributeBank,
    pub split: OpenSplit,
    pub unknown_classes: Vec<usize>,
    pub train: Vec<LabeledSample>,
    pub known_test: Vec<LabeledSample>,
    pub unknown: Vec<LabeledSample>,
}

impl OpenSetData {
    pub fn known_count(&self) -> usize {
        self.split.known.len()
    }

    /// Difficulty of an unknown label (`label >= K`).
    pub fn difficulty_of_label(&self, label: usize) -> Option<Difficulty> {
        let k = self.known_count();
        if label < k {
            return None;
        }
        self.unknown_classes
            .get(label - k)
            .and_then(|&c| self.split.difficulty_of(c))
    }

    pub fn manifest(&self) -> DataManifest {
        let k = self.known_count();
        let label_of = |c: usize| k + self.unknown_classes.iter().position(|&u| u == c).unwrap();
        DataManifest {
            config: self.config.clone(),
            known_classes: self.split.known.clone(),
            unknown_classes: self.unknown_classes.clone(),
            easy_labels: self.split.easy.iter().map(|&c| label_of(c)).collect(),
            medium_labels: self.split.medium.iter().map(|&c| label_of(c)).collect(),
            hard_labels: self.split.hard.iter().map(|&c| label_of(c)).collect(),
            bank: self.bank.clone(),
        }
    }
}

pub fn build_openset_data(cfg: &SynthConfig) -> Result<OpenSetData> {
    ensure!(
        cfg.known >= 1 && cfg.known <= cfg.classes,
        "known count must be in 1..=classes"
    );
    ensure!(
        cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0,
        "train fraction must be in (0, 1)"
    );
    let bank = make_attribute_bank(cfg.classes, cfg.attrs, cfg.groups, cfg.seed)?;
    let split = split_openset(&bank, cfg.known, cfg.seed)?;
    let samples = generate_dataset_with(
        &bank,
        cfg.per_class,
        cfg.dim,
        cfg.noise,
        cfg.prototype_scale,
        cfg.seed,
        Execution::default(),
    )?;
    let unknown_classes: Vec<usize> = split
        .hard
        .iter()
        .chain(&split.medium)
        .chain(&split.easy)
        .copied()
        .collect();
    let n_train = ((cfg.per_class as f64) * cfg.train_fraction).round() as usize;
    ensure!(
        n_train >= 1 && n_train < cfg.per_class,
        "train fraction leaves an empty train or test part"
    );
    let mut train = Vec::new();
    let mut known_test = Vec::new();
    let mut unknown = Vec::new();
    for (label, &c) in split.known.iter().enumerate() {
        for (i, s) in samples.iter().filter(|s| s.y == c).enumerate() {
            let s = LabeledSample {
                y: label,
                ..s.clone()
            };
            if i < n_train {
                train.push(s);
            } else {
                known_test.push(s);
            }
        }
    }
    for (j, &c) in unknown_classes.iter().enumerate() {
        for s in samples.iter().filter(|s| s.y == c) {
            unknown.push(LabeledSample {
                y: split.known.len() + j,
                ..s.clone()
            });
        }
    }
    Ok(OpenSetData {
        config: cfg.clone(),
        bank,
        split,
        unknown_classes,
        train,
        known_test,
        unknown,
    })
}

/// Sidecar describing a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub config: SynthConfig,
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
    pub easy_labels: Vec<usize>,
    pub medium_labels: Vec<usize>,
    pub hard_labels: Vec<usize>,
    pub bank: AttributeBank,
}

impl DataManifest {
    pub fn difficulty_of_label(&self, label: usize) -> Option<Difficulty> {
        if self.easy_labels.contains(&label) {
            Some(Difficulty::Easy)
        } else if self.medium_labels.contains(&label) {
            Some(Difficulty::Medium)
        } else if self.hard_labels.contains(&label) {
            Some(Difficulty::Hard)
        } else {
            None
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Load(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hamming(a: &[u8], b: &[u8]) -> usize {
        a.iter().zip(b).filter(|(x, y)| x != y).count()
    }

    #[test]
    fn two_class_bank_rows_differ() {
        let bank = make_attribute_bank(2, 8, 1, 3).unwrap();
        assert!(hamming(&bank.attrs[0], &bank.attrs[1]) >= 1);
    }

    #[test]
    fn bank_is_deterministic_and_valid() {
        let a = make_attribute_bank(16, 16, 4, 9).unwrap();
        assert_eq!(a, make_attribute_bank(16, 16, 4, 9).unwrap());
        for (i, row) in a.attrs.iter().enumerate() {
            assert!(row.iter().any(|&b| b == 1));
            for (j, other) in a.attrs.iter().enumerate().skip(i + 1) {
                assert_ne!(row, other);
                if a.groups[i] == a.groups[j] {
                    let shared = row.len() - hamming(row, other);
                    assert!(shared * 2 > row.len());
                }
            }
        }
    }

    #[test]
    fn within_group_closer_than_across() {
        for seed in 0..5 {
            let bank = make_attribute_bank(16, 16, 4, seed).unwrap();
            let (mut win, mut nw, mut acr, mut na) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..16 {
                for j in i + 1..16 {
                    let h = hamming(&bank.attrs[i], &bank.attrs[j]) as f64;
                    if bank.groups[i] == bank.groups[j] {
                        win += h;
                        nw += 1.0;
                    } else {
                        acr += h;
                        na += 1.0;
                    }
                }
            }
            assert!(win / nw < acr / na, "seed {seed}");
        }
    }

    #[test]
    fn infeasible_bank_rejected() {
        assert!(make_attribute_bank(300, 8, 2, 0).is_err());
        assert!(make_attribute_bank(4, 7, 1, 0).is_err());
        assert!(make_attribute_bank(3, 8, 2, 0).is_err());
    }

    #[test]
    fn noiseless_samples_coincide() {
        let bank = make_attribute_bank(4, 8, 2, 1).unwrap();
        let data = generate_dataset(&bank, 5, 10, 0.0, 1).unwrap();
        for c in 0..4 {
            let rows: Vec<_> = data.iter().filter(|s| s.y == c).collect();
            assert!(rows.windows(2).all(|w| w[0].x == w[1].x));
        }
    }

    #[test]
    fn uniform_class_histogram() {
        let bank = make_attribute_bank(8, 8, 2, 2).unwrap();
        let data = generate_dataset(&bank, 10, 8, 0.3, 2).unwrap();
        assert_eq!(data.len(), 80);
        for c in 0..8 {
            assert_eq!(data.iter().filter(|s| s.y == c).count(), 10);
            assert!(data
                .iter()
                .filter(|s| s.y == c)
                .all(|s| s.a == bank.attrs[c]));
        }
        assert!(generate_dataset(&bank, 0, 8, 0.3, 2).is_err());
        assert!(generate_dataset(&bank, 1, 7, 0.3, 2).is_err());
    }

    #[test]
    fn prototype_distance_tracks_hamming() {
        let bank = AttributeBank {
            attrs: vec![
                vec![1, 1, 0, 0, 1, 0, 1, 0],
                vec![1, 1, 0, 0, 1, 0, 1, 0],
                vec![0, 0, 1, 1, 0, 1, 0, 1],
                vec![1, 0, 0, 0, 1, 0, 1, 1],
            ],
            groups: vec![0, 0, 1, 1],
        };
        let p = class_prototypes(&bank, 12, 1.0, 4).unwrap();
        let dist = |i: usize, j: usize| -> f64 {
            p[i].iter()
                .zip(&p[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        assert!(dist(0, 1) < 1e-12);
        let mut max_pair = (0, 0, 0.0);
        for i in 0..4 {
            for j in i + 1..4 {
                let d = dist(i, j);
                let expected = (hamming(&bank.attrs[i], &bank.attrs[j]) as f64).sqrt();
                assert!((d - expected).abs() < 1e-9);
                if d > max_pair.2 {
                    max_pair = (i, j, d);
                }
            }
        }
        // the complementary pair is the farthest apart
        assert!(max_pair.0 == 0 || max_pair.0 == 1);
        assert_eq!(max_pair.1, 2);
    }

    #[test]
    fn identical_attributes_are_hard_disjoint_are_easy() {
        let bank = AttributeBank {
            attrs: vec![
                vec![1, 1, 1, 0, 0, 0, 0, 0],
                vec![1, 1, 0, 1, 0, 0, 0, 0],
                vec![1, 1, 1, 0, 0, 0, 0, 0],
                vec![0, 0, 0, 0, 1, 1, 1, 1],
                vec![1, 0, 1, 1, 0, 0, 0, 1],
            ],
            groups: vec![0; 5],
        };
        let split = split_with_known(&bank, vec![0, 1]).unwrap();
        assert_eq!(split.hard, vec![2]);
        assert_eq!(split.easy, vec![3]);
        assert_eq!(split.medium, vec![4]);
    }

    #[test]
    fn split_partitions_and_orders_by_similarity() {
        let bank = make_attribute_bank(16, 16, 4, 5).unwrap();
        let split = split_openset(&bank, 8, 5).unwrap();
        let mut all: Vec<usize> = split
            .known
            .iter()
            .chain(&split.easy)
            .chain(&split.medium)
            .chain(&split.hard)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert_eq!(split.easy.len() + split.medium.len() + split.hard.len(), 8);

        // brute-force ranking
        let sim = |c: usize| {
            split
                .known
                .iter()
                .map(|&k| attribute_cosine(&bank.attrs[c], &bank.attrs[k]))
                .fold(f64::MIN, f64::max)
        };
        for &h in &split.hard {
            for &m in &split.medium {
                assert!(sim(h) >= sim(m));
            }
        }
        for &m in &split.medium {
            for &e in &split.easy {
                assert!(sim(m) >= sim(e));
            }
        }
        assert!(split_openset(&bank, 9, 5).is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let bank = make_attribute_bank(4, 8, 2, 6).unwrap();
        let data = generate_dataset(&bank, 25, 9, 0.7, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_csv(&data, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.y, b.y);
            assert_eq!(a.a, b.a);
            assert!(a
                .x
                .iter()
                .zip(&b.x)
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label,a0\n0.5,1.0,0,1\n0.5,0\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "f0,f1,label,a0\n").unwrap();
        assert!(load_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn openset_data_labels() {
        let data = build_openset_data(&SynthConfig::default()).unwrap();
        assert_eq!(data.train.len(), 8 * 96);
        assert_eq!(data.known_test.len(), 8 * 32);
        assert_eq!(data.unknown.len(), 8 * 128);
        assert!(data.train.iter().all(|s| s.y < 8));
        assert!(data
            .unknown
            .iter()
            .all(|s| s.y >= 8 && data.difficulty_of_label(s.y).is_some()));
        let m = data.manifest();
        let back = DataManifest::from_toml(&m.to_toml().unwrap()).unwrap();
        assert_eq!(m, back);
    }
}
