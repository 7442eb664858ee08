//! Virtual outlier synthesis from streaming class-wise Gaussian estimates.
//!
//! Each known class keeps only two d-vectors: the running precision-weighted
//! mean numerator `Σ P_i ⊙ μ_i` and the running precision `Σ P_i`, where
//! `P_i = 1/σ_i²` is the diagonal posterior precision of one sample.

use serde::{Deserialize, Serialize};

use crate::encoder::VariationalPosterior;
use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::numkit::{DenseMatrix, Mlp, ParamStore, Rng, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDensity {
    pub class: usize,
    pub accum_pmu: Vec<f64>,
    pub accum_p: Vec<f64>,
    pub n_seen: u64,
}

impl ClassDensity {
    pub fn new(class: usize, dim: usize) -> Self {
        Self {
            class,
            accum_pmu: vec![0.0; dim],
            accum_p: vec![0.0; dim],
            n_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.accum_p.len()
    }

    fn ready(&self) -> Result<()> {
        if self.n_seen == 0 {
            return Err(Error::state(format!(
                "density for class {} has seen no samples",
                self.class
            )));
        }
        Ok(())
    }

    /// Precision-weighted mean `μ̂`.
    pub fn mean(&self) -> Result<Vec<f64>> {
        self.ready()?;
        Ok(self
            .accum_pmu
            .iter()
            .zip(&self.accum_p)
            .map(|(a, p)| a / p)
            .collect())
    }

    /// Diagonal precision `P̂`.
    pub fn precision(&self) -> Result<Vec<f64>> {
        self.ready()?;
        Ok(self.accum_p.clone())
    }

    /// Number of stored scalars; constant in the number of samples seen.
    pub fn state_len(&self) -> usize {
        self.accum_pmu.len() + self.accum_p.len() + 1
    }
}

/// Fold a batch of same-class posteriors into the running statistics.
pub fn update_density(density: &mut ClassDensity, batch: &[VariationalPosterior]) -> Result<()> {
    for post in batch {
        ensure!(
            post.dim() == density.dim(),
            "posterior dimension {} (density has {})",
            post.dim(),
            density.dim()
        );
    }
    for post in batch {
        for ((a, p), (m, s)) in density
            .accum_pmu
            .iter_mut()
            .zip(density.accum_p.iter_mut())
            .zip(post.mu.iter().zip(&post.sigma))
        {
            let prec = 1.0 / (s * s);
            *a += prec * m;
            *p += prec;
        }
    }
    density.n_seen += batch.len() as u64;
    Ok(())
}

/// Diagonal Gaussian log density with mean `μ̂` and precision `P̂`.
pub fn density_loglik(density: &ClassDensity, z: &[f64]) -> Result<f64> {
    density.ready()?;
    ensure!(
        z.len() == density.dim(),
        "point length {} (density has {})",
        z.len(),
        density.dim()
    );
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = 0.0;
    for ((zi, a), p) in z.iter().zip(&density.accum_pmu).zip(&density.accum_p) {
        let m = a / p;
        out += 0.5 * (p / tau).ln() - 0.5 * p * (zi - m) * (zi - m);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonMode {
    /// Keep the `retained` lowest-density candidates.
    Quantile,
    /// Keep candidates whose log density falls below `ln ε`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierConfig {
    pub candidates: usize,
    pub retained: usize,
    pub epsilon_mode: EpsilonMode,
    /// Density threshold (not log) used in absolute mode.
    pub epsilon: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            candidates: 200,
            retained: 20,
            epsilon_mode: EpsilonMode::Quantile,
            epsilon: 1e-3,
        }
    }
}

impl OutlierConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.candidates >= 1, "outlier candidates must be positive");
        ensure!(
            self.retained <= self.candidates,
            "retained outliers {} exceed candidates {}",
            self.retained,
            self.candidates
        );
        if self.epsilon_mode == EpsilonMode::Absolute {
            ensure!(
                self.epsilon > 0.0,
                "epsilon must be positive in absolute mode"
            );
        }
        Ok(())
    }
}

/// Raw candidate draws with their log densities, before selection.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierDraw {
    pub candidates: DenseMatrix,
    pub loglik: Vec<f64>,
    /// Indices into `candidates` of the retained points, lowest density first.
    pub retained: Vec<usize>,
    /// Normalized retained points `(z − μ̂) ⊙ √P̂`, one per row.
    pub normalized: DenseMatrix,
}

pub fn draw_virtual_outliers(
    density: &ClassDensity,
    cfg: &OutlierConfig,
    rng: &mut Rng,
) -> Result<OutlierDraw> {
    cfg.validate()?;
    let mu = density.mean()?;
    let prec = density.precision()?;
    let d = density.dim();
    let sd: Vec<f64> = prec.iter().map(|p| 1.0 / p.sqrt()).collect();
    let mut candidates = DenseMatrix::zeros(cfg.candidates, d);
    for r in 0..cfg.candidates {
        for (c, v) in candidates.row_mut(r).iter_mut().enumerate() {
            *v = mu[c] + sd[c] * rng.normal();
        }
    }
    let loglik = (0..cfg.candidates)
        .map(|r| density_loglik(density, candidates.row(r)))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..cfg.candidates).collect();
    order.sort_by(|&a, &b| loglik[a].total_cmp(&loglik[b]).then(a.cmp(&b)));
    let retained: Vec<usize> = match cfg.epsilon_mode {
        EpsilonMode::Quantile => order[..cfg.retained].to_vec(),
        EpsilonMode::Absolute => {
            let cut = cfg.epsilon.ln();
            order.into_iter().filter(|&i| loglik[i] < cut).collect()
        }
    };
    let mut normalized = DenseMatrix::zeros(retained.len(), d);
    for (row, &i) in retained.iter().enumerate() {
        for (c, v) in normalized.row_mut(row).iter_mut().enumerate() {
            *v = (candidates.get(i, c) - mu[c]) * prec[c].sqrt();
        }
    }
    Ok(OutlierDraw {
        candidates,
        loglik,
        retained,
        normalized,
    })
}

/// Normalized virtual outliers of one class (rows of a matrix).
pub fn sample_virtual_outliers(
    density: &ClassDensity,
    cfg: &OutlierConfig,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    Ok(draw_virtual_outliers(density, cfg, rng)?.normalized)
}

/// Outliers for every class, stacked in class order. Each class samples from
/// its own stream forked from `rng` before dispatch.
pub fn sample_all_outliers(
    densities: &[ClassDensity],
    cfg: &OutlierConfig,
    rng: &mut Rng,
    exec: Execution,
) -> Result<DenseMatrix> {
    let work: Vec<(&ClassDensity, Rng)> = densities.iter().map(|d| (d, rng.fork())).collect();
    let parts = exec.map_items(&work, |(d, r)| {
        sample_virtual_outliers(d, cfg, &mut r.clone())
    });
    let dim = densities.first().map_or(0, |d| d.dim());
    let mut rows = Vec::new();
    for p in parts {
        let p = p?;
        rows.extend_from_slice(p.data());
    }
    DenseMatrix::from_vec(rows.len() / dim.max(1), dim, rows)
}

fn lookup(densities: &[ClassDensity], class: usize) -> Result<&ClassDensity> {
    densities
        .iter()
        .find(|d| d.class == class && d.n_seen > 0)
        .ok_or_else(|| Error::state(format!("no fitted density for class {class}")))
}

/// `(z − μ̂_y) ⊙ √P̂_y` per sample.
pub fn normalize_known(
    z: &DenseMatrix,
    labels: &[usize],
    densities: &[ClassDensity],
) -> Result<DenseMatrix> {
    ensure!(
        labels.len() == z.rows(),
        "{} labels for {} rows",
        labels.len(),
        z.rows()
    );
    let mut out = DenseMatrix::zeros(z.rows(), z.cols());
    for (r, &y) in labels.iter().enumerate() {
        let d = lookup(densities, y)?;
        ensure!(
            d.dim() == z.cols(),
            "latent width {} (density has {})",
            z.cols(),
            d.dim()
        );
        let (mu, prec) = (d.mean()?, d.precision()?);
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (z.get(r, c) - mu[c]) * prec[c].sqrt();
        }
    }
    Ok(out)
}

/// Taped normalization; the class statistics enter as constants.
pub fn normalize_known_var(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    densities: &[ClassDensity],
) -> Result<Var> {
    let (b, d) = tape.value(z).shape();
    ensure!(labels.len() == b, "{} labels for {} rows", labels.len(), b);
    let mut shift = DenseMatrix::zeros(b, d);
    let mut scale = DenseMatrix::zeros(b, d);
    for (r, &y) in labels.iter().enumerate() {
        let dens = lookup(densities, y)?;
        ensure!(
            dens.dim() == d,
            "latent width {d} (density has {})",
            dens.dim()
        );
        let (mu, prec) = (dens.mean()?, dens.precision()?);
        for c in 0..d {
            shift.set(r, c, mu[c]);
            scale.set(r, c, prec[c].sqrt());
        }
    }
    let sv = tape.input(shift);
    let centered = tape.sub(z, sv)?;
    let kv = tape.input(scale);
    tape.mul(centered, kv)
}

/// Output index of the "unknown" class of the detector.
pub const UNKNOWN: usize = 1;
pub const KNOWN: usize = 0;

/// Binary known/unknown classifier on normalized latents; parameters live
/// in the `theta` store.
#[derive(Debug, Clone, PartialEq)]
pub struct OodDetector {
    net: Mlp,
}

impl OodDetector {
    pub fn new(latent: usize) -> Self {
        Self {
            net: Mlp::new("det", &[latent, 2 * latent, 2]),
        }
    }

    pub fn init(&self, theta: &mut ParamStore, rng: &mut Rng) {
        self.net.init(theta, rng);
    }

    pub fn logits_var(&self, tape: &mut Tape, theta: &ParamStore, v: Var) -> Result<Var> {
        self.net.forward(tape, theta, v)
    }

    /// Two-class probabilities `[known, unknown]` per row.
    pub fn probabilities(&self, theta: &ParamStore, v: &DenseMatrix) -> Result<DenseMatrix> {
        let l = self.net.forward_plain(theta, v)?;
        let mut out = DenseMatrix::zeros(l.rows(), 2);
        for r in 0..l.rows() {
            out.row_mut(r)
                .copy_from_slice(&crate::numkit::softmax(l.row(r)));
        }
        Ok(out)
    }
}

/// Mean two-class cross-entropy over the union: target unknown for
/// `v_plus` (constants), known for `v_minus` (may carry encoder gradients).
pub fn uvos_loss_var(
    tape: &mut Tape,
    det: &OodDetector,
    theta: &ParamStore,
    v_plus: &DenseMatrix,
    v_minus: Var,
) -> Result<Var> {
    let n_minus = tape.value(v_minus).rows();
    ensure!(
        v_plus.rows() + n_minus > 0,
        "uvos loss needs at least one sample"
    );
    let mut labels = vec![UNKNOWN; v_plus.rows()];
    labels.extend(std::iter::repeat_n(KNOWN, n_minus));
    let all = if v_plus.rows() == 0 {
        v_minus
    } else {
        let plus = tape.input(v_plus.clone());
        if n_minus == 0 {
            plus
        } else {
            tape.concat_rows(plus, v_minus)?
        }
    };
    let logits = det.logits_var(tape, theta, all)?;
    let ce = tape.cross_entropy(logits, &labels)?;
    tape.mean(ce)
}

/// Plain evaluation of the same loss.
pub fn uvos_loss(
    det: &OodDetector,
    theta: &ParamStore,
    v_plus: &DenseMatrix,
    v_minus: &DenseMatrix,
) -> Result<f64> {
    ensure!(
        v_plus.rows() + v_minus.rows() > 0,
        "uvos loss needs at least one sample"
    );
    let mut total = 0.0;
    for (set, target) in [(v_plus, UNKNOWN), (v_minus, KNOWN)] {
        if set.rows() == 0 {
            continue;
        }
        let p = det.probabilities(theta, set)?;
        for r in 0..p.rows() {
            total -= p.get(r, target).max(crate::numkit::LOG_FLOOR).ln();
        }
    }
    Ok(total / (v_plus.rows() + v_minus.rows()) as f64)
}
