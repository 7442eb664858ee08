//! Open-set scores, metrics, the Fréchet feature distance and latent
//! sampling for generation.

mod metrics;
mod plot;

use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use metrics::{aupr, auroc, oscr_scores};
pub use plot::score_histogram_svg;

use crate::ebm::{sgld_sample, SgldConfig};
use crate::error::{ensure, Result};
use crate::exec::Execution;
use crate::model::Model;
use crate::numkit::{argmax, logsumexp, softmax, DenseMatrix, Rng};
use crate::synthdata::{Difficulty, LabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    FreeEnergy,
    MaxJointEnergy,
    Msp,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [
        ScoreKind::FreeEnergy,
        ScoreKind::MaxJointEnergy,
        ScoreKind::Msp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::FreeEnergy => "free_energy",
            ScoreKind::MaxJointEnergy => "max_joint",
            ScoreKind::Msp => "msp",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Unknown-ness score of one logit vector; higher means more likely unknown.
pub fn ood_score(logits: &[f64], kind: ScoreKind) -> Result<f64> {
    ensure!(
        logits.len() >= 2,
        "scores need at least 2 logits, got {}",
        logits.len()
    );
    Ok(match kind {
        ScoreKind::FreeEnergy => -logsumexp(logits)?,
        ScoreKind::MaxJointEnergy => -logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ScoreKind::Msp => {
            1.0 - softmax(logits)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    KnownTest,
    Unknown(Difficulty),
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::KnownTest => "known_test",
            SplitTag::Unknown(d) => d.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub logits: Vec<f64>,
    pub label: usize,
    pub split: SplitTag,
    pub pred: usize,
    /// Indexed by [`ScoreKind`] order.
    pub scores: [f64; 3],
}

impl ScoreRow {
    pub fn new(logits: Vec<f64>, label: usize, split: SplitTag) -> Result<Self> {
        let mut scores = [0.0; 3];
        for k in ScoreKind::ALL {
            scores[k.index()] = ood_score(&logits, k)?;
        }
        Ok(Self {
            pred: argmax(&logits),
            logits,
            label,
            split,
            scores,
        })
    }

    pub fn score(&self, kind: ScoreKind) -> f64 {
        self.scores[kind.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub classes: usize,
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    /// Score known-test and unknown samples; `difficulty` maps an unknown
    /// label to its split.
    pub fn from_model(
        model: &Model,
        known_test: &[LabeledSample],
        unknown: &[LabeledSample],
        difficulty: impl Fn(usize) -> Option<Difficulty>,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(known_test.len() + unknown.len());
        for (set, is_known) in [(known_test, true), (unknown, false)] {
            if set.is_empty() {
                continue;
            }
            let x =
                DenseMatrix::from_rows(&set.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>())?;
            ensure!(
                x.cols() == model.dims.input,
                "samples have {} features, model expects {}",
                x.cols(),
                model.dims.input
            );
            let logits = model.logits(&x)?;
            for (r, s) in set.iter().enumerate() {
                let split = if is_known {
                    SplitTag::KnownTest
                } else {
                    SplitTag::Unknown(difficulty(s.y).ok_or_else(|| {
                        crate::Error::invalid(format!("label {} has no difficulty", s.y))
                    })?)
                };
                rows.push(ScoreRow::new(logits.row(r).to_vec(), s.y, split)?);
            }
        }
        Ok(Self {
            classes: model.dims.classes,
            rows,
        })
    }

    pub fn known(&self) -> impl Iterator<Item = &ScoreRow> {
        self.rows.iter().filter(|r| r.split == SplitTag::KnownTest)
    }

    pub fn unknown(&self, d: Option<Difficulty>) -> impl Iterator<Item = &ScoreRow> {
        self.rows.iter().filter(move |r| match (r.split, d) {
            (SplitTag::Unknown(_), None) => true,
            (SplitTag::Unknown(x), Some(y)) => x == y,
            _ => false,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in 0..self.classes {
            let _ = write!(out, "logit_{k},");
        }
        out.push_str("label,split,pred,free_energy,max_joint,msp\n");
        for r in &self.rows {
            for l in &r.logits {
                let _ = write!(out, "{l:.16e},");
            }
            let _ = writeln!(
                out,
                "{},{},{},{:.16e},{:.16e},{:.16e}",
                r.label,
                r.split.as_str(),
                r.pred,
                r.scores[0],
                r.scores[1],
                r.scores[2]
            );
        }
        out
    }
}

/// Fraction of known-test rows predicted correctly.
pub fn accuracy(report: &ScoreReport) -> Result<f64> {
    let (mut n, mut hit) = (0usize, 0usize);
    for r in report.known() {
        n += 1;
        hit += (r.pred == r.label) as usize;
    }
    ensure!(n > 0, "report has no known-test rows");
    Ok(hit as f64 / n as f64)
}

fn split_scores(
    report: &ScoreReport,
    kind: ScoreKind,
    d: Option<Difficulty>,
) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    let known: Vec<&ScoreRow> = report.known().collect();
    (
        known.iter().map(|r| r.score(kind)).collect(),
        known.iter().map(|r| r.pred == r.label).collect(),
        report.unknown(d).map(|r| r.score(kind)).collect(),
    )
}

/// OSCR of known-test rows against the unknown rows of one split (all
/// unknown rows when `d` is `None`).
pub fn oscr(report: &ScoreReport, kind: ScoreKind, d: Option<Difficulty>) -> Result<f64> {
    let (k, c, u) = split_scores(report, kind, d);
    oscr_scores(&k, &c, &u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Difficulty,
    pub kind: ScoreKind,
    pub auroc: f64,
    pub aupr: f64,
    pub oscr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub acc: f64,
    pub splits: Vec<SplitMetrics>,
    pub ffd: Option<f64>,
}

impl MetricsBundle {
    pub fn get(&self, split: Difficulty, kind: ScoreKind) -> Option<&SplitMetrics> {
        self.splits
            .iter()
            .find(|m| m.split == split && m.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("ACC {:.4}\n", self.acc);
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:>8} {:>8} {:>8}",
            "split", "score", "AUROC", "AUPR", "OSCR"
        );
        for m in &self.splits {
            let _ = writeln!(
                out,
                "{:<8} {:<12} {:>8.4} {:>8.4} {:>8.4}",
                m.split.as_str(),
                m.kind.as_str(),
                m.auroc,
                m.aupr,
                m.oscr
            );
        }
        if let Some(f) = self.ffd {
            let _ = writeln!(out, "FFD {f:.6}");
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| crate::Error::invalid(e.to_string()))
    }
}

/// ACC plus AUROC/AUPR/OSCR for every (split, score kind) pair. Pairs are
/// evaluated as independent work items.
pub fn evaluate_report(report: &ScoreReport, exec: Execution) -> Result<MetricsBundle> {
    let acc = accuracy(report)?;
    let pairs: Vec<(Difficulty, ScoreKind)> = Difficulty::ALL
        .iter()
        .flat_map(|&d| ScoreKind::ALL.iter().map(move |&k| (d, k)))
        .collect();
    let splits = exec
        .map_items(&pairs, |&(d, kind)| -> Result<SplitMetrics> {
            let (k, c, u) = split_scores(report, kind, Some(d));
            Ok(SplitMetrics {
                split: d,
                kind,
                auroc: auroc(&k, &u)?,
                aupr: aupr(&k, &u)?,
                oscr: oscr_scores(&k, &c, &u)?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsBundle {
        acc,
        splits,
        ffd: None,
    })
}

fn mean_cov(x: &DenseMatrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mean = x.column_means().into_vec();
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_r − μ_f‖² + Tr(Σ_r + Σ_f − 2 (Σ_r Σ_f)^{1/2})` on raw features.
pub fn frechet_feature_distance(real: &DenseMatrix, fake: &DenseMatrix) -> Result<f64> {
    let d = real.cols();
    ensure!(
        fake.cols() == d,
        "feature widths differ: {} vs {}",
        d,
        fake.cols()
    );
    ensure!(
        real.rows() > d && fake.rows() > d,
        "need more than {d} samples per set (got {} and {})",
        real.rows(),
        fake.rows()
    );
    let (mr, cr) = mean_cov(real);
    let (mf, cf) = mean_cov(fake);
    let mean_term: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b) * (a - b)).sum();
    // (Σr Σf)^{1/2} has the trace of (√Σr Σf √Σr)^{1/2}, which is symmetric
    let sr = psd_sqrt(&cr);
    let inner = &sr * &cf * &sr;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mean_term + cr.trace() + cf.trace() - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Random,
    Posterior,
    Prior,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Random => "random",
            SampleMode::Posterior => "posterior",
            SampleMode::Prior => "prior",
        }
    }
}

/// `n` latents: standard normal draws, reparametrized posterior samples of
/// the rows of `x` (cycled), or Langevin samples from the trained prior.
pub fn sample_latents(
    model: &Model,
    mode: SampleMode,
    n: usize,
    rng: &mut Rng,
    x: Option<&DenseMatrix>,
    sgld: &SgldConfig,
    exec: Execution,
) -> Result<DenseMatrix> {
    let d = model.dims.latent;
    match mode {
        SampleMode::Random => Ok(rng.normal_matrix(n, d)),
        SampleMode::Posterior => {
            let x =
                x.ok_or_else(|| crate::Error::invalid("posterior sampling needs input samples"))?;
            ensure!(
                x.rows() > 0,
                "posterior sampling needs at least one input row"
            );
            let idx: Vec<usize> = (0..n).map(|i| i % x.rows()).collect();
            let (mu, ls) = model.posterior_batch(&x.select_rows(&idx))?;
            let noise = rng.normal_matrix(n, d);
            let mut z = mu.clone();
            for ((zv, l), e) in z.data_mut().iter_mut().zip(ls.data()).zip(noise.data()) {
                *zv += l.exp() * e;
            }
            Ok(z)
        }
        SampleMode::Prior => {
            let z0 = rng.normal_matrix(n, d);
            Ok(sgld_sample(&model.head, &model.stores.alpha, &z0, sgld, rng, exec)?.z)
        }
    }
}

/// Decode latents to feature space.
pub fn generate(model: &Model, z: &DenseMatrix) -> Result<DenseMatrix> {
    model.decoder.decode_batch(&model.stores.beta, z)
}
