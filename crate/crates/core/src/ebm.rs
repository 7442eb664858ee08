//! Energy-based latent prior and the open-set classifier head built on it.
//!
//! The head `f_α: R^d → R^K` gives class logits; the prior energy is
//! `E_α(z) = −logsumexp f_α(z)` and the unnormalized prior log density is
//! `−E_α(z) − ½‖z‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec::Execution;
use crate::numkit::{
    argmax, logsumexp, softmax, DenseMatrix, Mlp, ParamStore, Rng, Tape, Var, LOG_FLOOR,
};

/// Langevin chains per parallel work unit.
pub const SGLD_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_on: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.4,
            noise_on: true,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "sgld steps must be at least 1");
        ensure!(
            self.step_size > 0.0 && self.step_size.is_finite(),
            "sgld step size must be positive, got {}",
            self.step_size
        );
        Ok(())
    }
}

/// Detached samples from the latent prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSampleBatch {
    pub z: DenseMatrix,
}

/// Shape of `f_α`; parameters live in the `alpha` store.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyHead {
    latent: usize,
    classes: usize,
    net: Mlp,
}

impl EnergyHead {
    pub fn new(latent: usize, classes: usize) -> Result<Self> {
        ensure!(
            classes >= 2,
            "energy head needs at least 2 classes, got {classes}"
        );
        ensure!(latent >= 1, "latent dimension must be positive");
        Ok(Self {
            latent,
            classes,
            net: Mlp::new("head", &[latent, 2 * latent, classes]),
        })
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn init(&self, alpha: &mut ParamStore, rng: &mut Rng) {
        self.net.init(alpha, rng);
    }

    pub fn logits_var(&self, tape: &mut Tape, alpha: &ParamStore, z: Var) -> Result<Var> {
        self.net.forward(tape, alpha, z)
    }

    /// B×1 energies on the tape.
    pub fn energy_var(&self, tape: &mut Tape, alpha: &ParamStore, z: Var) -> Result<Var> {
        let l = self.logits_var(tape, alpha, z)?;
        let lse = tape.row_logsumexp(l)?;
        tape.neg(lse)
    }

    pub fn logits_batch(&self, alpha: &ParamStore, z: &DenseMatrix) -> Result<DenseMatrix> {
        self.net.forward_plain(alpha, z)
    }

    pub fn logits(&self, alpha: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            z.len() == self.latent,
            "latent length {} (expected {})",
            z.len(),
            self.latent
        );
        Ok(self
            .logits_batch(alpha, &DenseMatrix::row_vector(z))?
            .into_vec())
    }

    pub fn energy(&self, alpha: &ParamStore, z: &[f64]) -> Result<f64> {
        Ok(-logsumexp(&self.logits(alpha, z)?)?)
    }

    pub fn energy_batch(&self, alpha: &ParamStore, z: &DenseMatrix) -> Result<Vec<f64>> {
        let l = self.logits_batch(alpha, z)?;
        (0..l.rows())
            .map(|r| logsumexp(l.row(r)).map(|v| -v))
            .collect()
    }

    /// `−E_α(z) − ½‖z‖²`; the partition function is never represented.
    pub fn prior_logdensity_unnorm(&self, alpha: &ParamStore, z: &[f64]) -> Result<f64> {
        let e = self.energy(alpha, z)?;
        Ok(-e - 0.5 * z.iter().map(|v| v * v).sum::<f64>())
    }

    pub fn classify(&self, alpha: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(alpha, z)?))
    }

    pub fn predict(&self, alpha: &ParamStore, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(alpha, z)?))
    }

    /// Energies and `∂E/∂z` for each row, by a manual backward pass.
    pub fn energy_grad(
        &self,
        alpha: &ParamStore,
        z: &DenseMatrix,
    ) -> Result<(Vec<f64>, DenseMatrix)> {
        ensure!(
            z.cols() == self.latent,
            "latent width {} (expected {})",
            z.cols(),
            self.latent
        );
        let layers = self.net.layers();
        let mut acts = Vec::with_capacity(layers);
        let mut h = z.clone();
        for l in 0..layers {
            let w = alpha.value(&self.net.weight_name(l))?;
            let b = alpha.value(&self.net.bias_name(l))?;
            let mut next = h.matmul(w)?;
            for r in 0..next.rows() {
                for (v, bb) in next.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                    if l + 1 < layers {
                        *v = v.tanh();
                    }
                }
            }
            acts.push(h);
            h = next;
        }
        let mut energies = Vec::with_capacity(h.rows());
        let mut g = DenseMatrix::zeros(h.rows(), h.cols());
        for r in 0..h.rows() {
            let row = h.row(r);
            energies.push(-logsumexp(row)?);
            for (gv, p) in g.row_mut(r).iter_mut().zip(softmax(row)) {
                *gv = -p;
            }
        }
        for l in (0..layers).rev() {
            let w = alpha.value(&self.net.weight_name(l))?;
            g = g.matmul_t(w);
            if l > 0 {
                let a = &acts[l];
                for (gv, av) in g.data_mut().iter_mut().zip(a.data()) {
                    *gv *= 1.0 - av * av;
                }
            }
        }
        Ok((energies, g))
    }
}

fn sgld_chain_block(
    head: &EnergyHead,
    alpha: &ParamStore,
    mut z: DenseMatrix,
    cfg: &SgldConfig,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    let s = cfg.step_size;
    let drift = 0.5 * s * s;
    for step in 0..cfg.steps {
        let (_, grad) = head.energy_grad(alpha, &z)?;
        for (zv, gv) in z.data_mut().iter_mut().zip(grad.data()) {
            *zv -= drift * (gv + *zv);
            if cfg.noise_on {
                *zv += s * rng.normal();
            }
        }
        if !z.is_finite() {
            return Err(Error::Divergence(format!(
                "sgld iterate became non-finite at step {}",
                step + 1
            )));
        }
    }
    Ok(z)
}

/// Langevin iterations `z ← z − (s²/2)∇U(z) + s·ε`, `U = E_α + ½‖z‖²`.
///
/// Chains are processed in blocks of [`SGLD_CHUNK`]; each block takes its
/// own stream forked from `rng` before dispatch, so the result does not
/// depend on `exec`.
pub fn sgld_sample(
    head: &EnergyHead,
    alpha: &ParamStore,
    z0: &DenseMatrix,
    cfg: &SgldConfig,
    rng: &mut Rng,
    exec: Execution,
) -> Result<PriorSampleBatch> {
    cfg.validate()?;
    ensure!(z0.is_finite(), "sgld start points must be finite");
    ensure!(
        z0.cols() == head.latent,
        "sgld start width {} (expected {})",
        z0.cols(),
        head.latent
    );
    let n = z0.rows();
    let blocks: Vec<(Vec<usize>, Rng)> = (0..n.div_ceil(SGLD_CHUNK))
        .map(|b| {
            let idx = (b * SGLD_CHUNK..((b + 1) * SGLD_CHUNK).min(n)).collect();
            (idx, rng.fork())
        })
        .collect();
    let results = exec.map_items(&blocks, |(idx, r)| {
        let mut r = r.clone();
        sgld_chain_block(head, alpha, z0.select_rows(idx), cfg, &mut r)
    });
    let mut z = DenseMatrix::zeros(n, head.latent);
    let mut row = 0;
    for block in results {
        let block = block?;
        for r in 0..block.rows() {
            z.row_mut(row).copy_from_slice(block.row(r));
            row += 1;
        }
    }
    Ok(PriorSampleBatch { z })
}

/// `mean E_α(z_post) − mean E_α(z_prior)` on the tape; prior samples enter
/// as constants.
pub fn ebm_loss(
    tape: &mut Tape,
    head: &EnergyHead,
    alpha: &ParamStore,
    z_post: Var,
    z_prior: &PriorSampleBatch,
) -> Result<Var> {
    ensure!(
        tape.value(z_post).rows() > 0,
        "ebm loss over an empty posterior batch"
    );
    ensure!(z_prior.z.rows() > 0, "ebm loss over an empty prior batch");
    let ep = head.energy_var(tape, alpha, z_post)?;
    let prior = tape.input(z_prior.z.clone());
    let en = head.energy_var(tape, alpha, prior)?;
    let a = tape.mean(ep)?;
    let b = tape.mean(en)?;
    tape.sub(a, b)
}

/// Negative log-probability of the label, probabilities floored at 1e-12.
pub fn cls_loss(probs: &[f64], y: usize) -> Result<f64> {
    ensure!(
        y < probs.len(),
        "label {y} out of range for {} classes",
        probs.len()
    );
    Ok(-probs[y].max(LOG_FLOOR).ln())
}

fn class_entropy(p: f64) -> f64 {
    -p * p.max(LOG_FLOOR).ln()
}

/// Batch estimate of the class-coupled entropy contrast
/// `mean_i CH(p̄)[y_i] − mean_i CH(p_i)[y_i]`.
pub fn aib_term(probs: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    ensure!(probs.rows() > 0, "aib term over an empty batch");
    ensure!(
        labels.len() == probs.rows(),
        "{} labels for {} rows",
        labels.len(),
        probs.rows()
    );
    ensure!(
        labels.iter().all(|&y| y < probs.cols()),
        "label out of range"
    );
    let mean = probs.column_means();
    let b = probs.rows() as f64;
    let marginal: f64 = labels
        .iter()
        .map(|&y| class_entropy(mean.data()[y]))
        .sum::<f64>()
        / b;
    let conditional: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| class_entropy(probs.get(i, y)))
        .sum::<f64>()
        / b;
    Ok(marginal - conditional)
}
