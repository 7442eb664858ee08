//! Latent-to-data decoder and the energy-based VAE objective.

use crate::ebm::EnergyHead;
use crate::encoder::{reparameterize, VariationalPosterior};
use crate::error::{ensure, Result};
use crate::numkit::{DenseMatrix, Mlp, ParamStore, Rng, Tape, Var};

/// Hidden width of the decoder.
pub const DECODER_HIDDEN: usize = 32;

/// Shape of `f_β: R^d → R^D`; parameters live in the `beta` store.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    net: Mlp,
}

impl Decoder {
    pub fn new(latent: usize, output: usize) -> Self {
        Self {
            net: Mlp::new("dec", &[latent, DECODER_HIDDEN, output]),
        }
    }

    pub fn latent(&self) -> usize {
        self.net.input_size()
    }

    pub fn output(&self) -> usize {
        self.net.output_size()
    }

    pub fn init(&self, beta: &mut ParamStore, rng: &mut Rng) {
        self.net.init(beta, rng);
    }

    pub fn decode_var(&self, tape: &mut Tape, beta: &ParamStore, z: Var) -> Result<Var> {
        self.net.forward(tape, beta, z)
    }

    pub fn decode_batch(&self, beta: &ParamStore, z: &DenseMatrix) -> Result<DenseMatrix> {
        self.net.forward_plain(beta, z)
    }

    pub fn decode(&self, beta: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            z.len() == self.latent(),
            "latent length {} (expected {})",
            z.len(),
            self.latent()
        );
        Ok(self
            .decode_batch(beta, &DenseMatrix::row_vector(z))?
            .into_vec())
    }
}

/// `½‖x̂ − x‖²`.
pub fn recon_loss(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    ensure!(
        x_hat.len() == x.len(),
        "reconstruction length {} vs data length {}",
        x_hat.len(),
        x.len()
    );
    Ok(0.5
        * x_hat
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// `½ Σ (μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_to_standard_normal(post: &VariationalPosterior) -> f64 {
    0.5 * post
        .mu
        .iter()
        .zip(&post.sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln())
        .sum::<f64>()
}

/// Single-sample estimate split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaeBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub energy: f64,
}

impl EvaeBreakdown {
    pub fn total(&self) -> f64 {
        self.recon + self.kl + self.energy
    }
}

pub fn evae_loss(
    dec: &Decoder,
    beta: &ParamStore,
    head: &EnergyHead,
    alpha: &ParamStore,
    post: &VariationalPosterior,
    x: &[f64],
    rng: &mut Rng,
) -> Result<EvaeBreakdown> {
    ensure!(
        post.dim() == dec.latent(),
        "posterior dimension {} (expected {})",
        post.dim(),
        dec.latent()
    );
    let z = reparameterize(post, rng);
    let x_hat = dec.decode(beta, &z)?;
    Ok(EvaeBreakdown {
        recon: recon_loss(&x_hat, x)?,
        kl: kl_to_standard_normal(post),
        energy: head.energy(alpha, &z)?,
    })
}

/// Taped batch terms, each a 1×1 batch mean.
#[derive(Debug, Clone, Copy)]
pub struct EvaeVars {
    pub recon: Var,
    pub kl: Var,
    pub energy: Var,
}

/// Batch version on the tape. `noise` is the B×d standard normal draw used
/// for the reparametrized sample `z = μ + noise ⊙ exp(log σ)`.
#[allow(clippy::too_many_arguments)]
pub fn evae_loss_var(
    tape: &mut Tape,
    dec: &Decoder,
    beta: &ParamStore,
    head: &EnergyHead,
    alpha: &ParamStore,
    mu: Var,
    log_sigma: Var,
    x: &DenseMatrix,
    noise: &DenseMatrix,
) -> Result<(EvaeVars, Var)> {
    ensure!(
        tape.value(mu).shape() == noise.shape(),
        "noise shape {:?} vs posterior {:?}",
        noise.shape(),
        tape.value(mu).shape()
    );
    ensure!(x.rows() == noise.rows(), "batch sizes differ");
    let sigma = tape.exp(log_sigma)?;
    let n = tape.input(noise.clone());
    let spread = tape.mul(sigma, n)?;
    let z = tape.add(mu, spread)?;

    let x_hat = dec.decode_var(tape, beta, z)?;
    let xv = tape.input(x.clone());
    let diff = tape.sub(x_hat, xv)?;
    let sq = tape.square(diff)?;
    let per = tape.row_sum(sq)?;
    let recon = tape.mean(per)?;
    let recon = tape.scale(recon, 0.5)?;

    let mu2 = tape.square(mu)?;
    let s2 = tape.square(sigma)?;
    let a = tape.add(mu2, s2)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let b = tape.sub(a, two_ls)?;
    let per = tape.row_sum(b)?;
    let mean = tape.mean(per)?;
    let d = noise.cols() as f64;
    let kl = tape.scale(mean, 0.5)?;
    let offset = tape.input(DenseMatrix::scalar(-0.5 * d));
    let kl = tape.add(kl, offset)?;

    let e = head.energy_var(tape, alpha, z)?;
    let energy = tape.mean(e)?;
    Ok((EvaeVars { recon, kl, energy }, z))
}
