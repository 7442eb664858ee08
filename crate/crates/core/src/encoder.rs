//! Variational encoder with residual attribute feature aggregation.
//!
//! Pipeline per sample: global feature `z = f_phi1(x)`; M attribute heads
//! decompose `z` into node features `F` (M × d); two graph-convolution
//! layers over the attribute graph plus a shared per-node score predict
//! attribute presence `â`; the masked nodes `â ⊙ F` are concatenated,
//! mapped back to the feature space and added to `z`; a final network
//! emits the posterior mean and log standard deviation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numkit::{DenseMatrix, Mlp, ParamStore, Rng, Tape, Var, BCE_CLAMP};

/// Bounds applied to the emitted log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    /// Data feature length D.
    pub input: usize,
    /// Global feature length.
    pub feat: usize,
    /// Latent length d (also the attribute node width).
    pub latent: usize,
    /// Attribute count M.
    pub attrs: usize,
    /// Hidden width of the extractor and posterior networks.
    pub hidden: usize,
}

/// Diagonal Gaussian posterior over the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        ensure!(mu.len() == sigma.len(), "mu and sigma lengths differ");
        ensure!(
            sigma.iter().all(|s| *s > 0.0 && s.is_finite()),
            "sigma must be positive and finite"
        );
        ensure!(mu.iter().all(|m| m.is_finite()), "mu must be finite");
        Ok(Self { mu, sigma })
    }

    /// Build from an unconstrained log standard deviation, clamped.
    pub fn from_log_sigma(mu: Vec<f64>, log_sigma: &[f64]) -> Result<Self> {
        let sigma = log_sigma
            .iter()
            .map(|l| l.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp())
            .collect();
        Self::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Elementwise precision `1 / sigma²`.
    pub fn precision(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| 1.0 / (s * s)).collect()
    }
}

/// `z̃ = μ̃ + n ⊙ σ̃` with `n ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(post: &VariationalPosterior, rng: &mut Rng) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.sigma)
        .map(|(m, s)| m + rng.normal() * s)
        .collect()
}

/// Attribute co-occurrence graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    /// Conditional frequencies `count(i ∧ j) / count(i)`.
    pub conditional: DenseMatrix,
    /// Binarized at `tau`, off-diagonal mass re-weighted to `p`.
    pub reweighted: DenseMatrix,
    /// Symmetric degree normalization of `reweighted + I`.
    pub normalized: DenseMatrix,
}

/// Co-occurrence adjacency from training attribute rows.
///
/// Rows whose attribute has no co-occurring neighbour after binarization
/// keep all their mass on the diagonal, so every re-weighted row sums to 1
/// and the normalized matrix equals `(reweighted + I) / 2`.
pub fn build_adjacency(train_attrs: &[Vec<u8>], tau: f64, p: f64) -> Result<Adjacency> {
    ensure!(
        !train_attrs.is_empty(),
        "need at least one training attribute row"
    );
    ensure!(tau > 0.0 && tau < 1.0, "tau must be in (0, 1), got {tau}");
    ensure!(p > 0.0 && p < 1.0, "p must be in (0, 1), got {p}");
    let m = train_attrs[0].len();
    ensure!(
        train_attrs.iter().all(|r| r.len() == m),
        "attribute rows have inconsistent lengths"
    );
    let mut count = vec![0.0; m];
    let mut joint = DenseMatrix::zeros(m, m);
    for row in train_attrs {
        for i in 0..m {
            if row[i] == 0 {
                continue;
            }
            count[i] += 1.0;
            for j in 0..m {
                if row[j] == 1 {
                    joint.set(i, j, joint.get(i, j) + 1.0);
                }
            }
        }
    }
    let mut conditional = DenseMatrix::zeros(m, m);
    for i in 0..m {
        if count[i] > 0.0 {
            for j in 0..m {
                conditional.set(i, j, joint.get(i, j) / count[i]);
            }
        }
    }
    let mut reweighted = DenseMatrix::zeros(m, m);
    for i in 0..m {
        let neighbours: Vec<usize> = (0..m)
            .filter(|&j| j != i && conditional.get(i, j) >= tau)
            .collect();
        if neighbours.is_empty() {
            reweighted.set(i, i, 1.0);
        } else {
            let share = p / neighbours.len() as f64;
            for j in neighbours {
                reweighted.set(i, j, share);
            }
            reweighted.set(i, i, 1.0 - p);
        }
    }
    let mut with_loops = reweighted.clone();
    for i in 0..m {
        with_loops.set(i, i, with_loops.get(i, i) + 1.0);
    }
    let degree: Vec<f64> = (0..m).map(|i| with_loops.row(i).iter().sum()).collect();
    let mut normalized = DenseMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            normalized.set(i, j, with_loops.get(i, j) / (degree[i] * degree[j]).sqrt());
        }
    }
    Ok(Adjacency {
        conditional,
        reweighted,
        normalized,
    })
}

/// Node features of one sample together with the normalized adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeGraph {
    pub features: DenseMatrix,
    pub adjacency: DenseMatrix,
}

/// Mean over attributes of the clamped binary cross-entropy.
pub fn attr_loss(a_hat: &[f64], a: &[u8]) -> Result<f64> {
    ensure!(
        a_hat.len() == a.len(),
        "attr_loss: {} scores for {} labels",
        a_hat.len(),
        a.len()
    );
    ensure!(!a.is_empty(), "attr_loss over zero attributes");
    let s: f64 = a_hat
        .iter()
        .zip(a)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// Taped outputs of one encoder pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub z: Var,
    /// `None` when aggregation is bypassed.
    pub features: Option<Var>,
    pub a_hat: Option<Var>,
    pub mu: Var,
    pub log_sigma: Var,
}

/// Architecture of the encoder; parameters live in three stores:
/// `phi1` (extractor), `omega` (heads, graph layers, scores) and `phi2`
/// (aggregation and posterior networks).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub dims: EncoderDims,
    /// When false the posterior is computed from `z` alone.
    pub use_rafa: bool,
    extractor: Mlp,
    aggregator: Mlp,
    posterior: Mlp,
}

impl Encoder {
    pub fn new(dims: EncoderDims, use_rafa: bool) -> Self {
        let md = dims.attrs * dims.latent;
        Self {
            dims,
            use_rafa,
            extractor: Mlp::new("enc", &[dims.input, dims.hidden, dims.feat]),
            aggregator: Mlp::new("agg", &[md, dims.feat, dims.feat]),
            posterior: Mlp::new("post", &[dims.feat, dims.hidden, 2 * dims.latent]),
        }
    }

    pub fn init(
        &self,
        phi1: &mut ParamStore,
        omega: &mut ParamStore,
        phi2: &mut ParamStore,
        rng: &mut Rng,
    ) {
        let EncoderDims {
            feat,
            latent: d,
            attrs: m,
            ..
        } = self.dims;
        self.extractor.init(phi1, rng);
        omega.insert_normal("heads.w0", feat, m * d, (1.0 / feat as f64).sqrt(), rng);
        omega.insert("heads.b0", DenseMatrix::zeros(1, m * d));
        omega.insert_normal("heads.w1", m * d, d, (1.0 / d as f64).sqrt(), rng);
        omega.insert("heads.b1", DenseMatrix::zeros(1, m * d));
        omega.insert_normal("gcn.w0", d, d, (1.0 / d as f64).sqrt(), rng);
        omega.insert_normal("gcn.w1", d, d, (1.0 / d as f64).sqrt(), rng);
        omega.insert_normal("score.w", d, 1, (1.0 / d as f64).sqrt(), rng);
        omega.insert("score.b", DenseMatrix::zeros(1, 1));
        self.aggregator.init(phi2, rng);
        self.posterior.init(phi2, rng);
    }

    /// Global feature `z = f_phi1(x)` for a B×D batch.
    pub fn encode(&self, tape: &mut Tape, phi1: &ParamStore, x: Var) -> Result<Var> {
        self.extractor.forward(tape, phi1, x)
    }

    /// Row m of each sample's node matrix is `h_m(z)`; output is B×(M·d).
    pub fn decompose(&self, tape: &mut Tape, omega: &ParamStore, z: Var) -> Result<Var> {
        let EncoderDims { feat, attrs: m, .. } = self.dims;
        ensure!(
            tape.value(z).cols() == feat,
            "decompose: feature width {} (expected {feat})",
            tape.value(z).cols()
        );
        let w0 = tape.param(omega, "heads.w0")?;
        let b0 = tape.param(omega, "heads.b0")?;
        let w1 = tape.param(omega, "heads.w1")?;
        let b1 = tape.param(omega, "heads.b1")?;
        let h = tape.matmul(z, w0)?;
        let h = tape.add_bias(h, b0)?;
        let h = tape.tanh(h)?;
        let f = tape.grouped_matmul(h, w1, m)?;
        tape.add_bias(f, b1)
    }

    /// Attribute scores in (0, 1) from B×(M·d) node features.
    pub fn predict_attributes(
        &self,
        tape: &mut Tape,
        omega: &ParamStore,
        features: Var,
        adjacency: &DenseMatrix,
    ) -> Result<Var> {
        let EncoderDims {
            latent: d,
            attrs: m,
            ..
        } = self.dims;
        let b = tape.value(features).rows();
        ensure!(
            tape.value(features).cols() == m * d,
            "node features must be {m}x{d} per sample"
        );
        ensure!(adjacency.shape() == (m, m), "adjacency must be {m}x{m}");
        let mut h = features;
        for layer in ["gcn.w0", "gcn.w1"] {
            let w = tape.param(omega, layer)?;
            let flat = tape.reshape(h, b * m, d)?;
            let proj = tape.matmul(flat, w)?;
            let proj = tape.reshape(proj, b, m * d)?;
            let mixed = tape.node_mix(proj, adjacency)?;
            h = tape.tanh(mixed)?;
        }
        let ws = tape.param(omega, "score.w")?;
        let bs = tape.param(omega, "score.b")?;
        let flat = tape.reshape(h, b * m, d)?;
        let s = tape.matmul(flat, ws)?;
        let s = tape.add_bias(s, bs)?;
        let s = tape.reshape(s, b, m)?;
        tape.sigmoid(s)
    }

    /// Posterior (mean, clamped log std) from `z`, node features and scores.
    /// With aggregation bypassed, `features`/`a_hat` are ignored.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        phi2: &ParamStore,
        z: Var,
        features: Option<Var>,
        a_hat: Option<Var>,
    ) -> Result<(Var, Var)> {
        let d = self.dims.latent;
        let input = match (self.use_rafa, features, a_hat) {
            (true, Some(f), Some(a)) => {
                let masked = tape.scale_nodes(f, a)?;
                let mapped = self.aggregator.forward(tape, phi2, masked)?;
                tape.add(z, mapped)?
            }
            (true, _, _) => {
                return Err(crate::Error::invalid(
                    "aggregation requires node features and attribute scores",
                ))
            }
            (false, _, _) => z,
        };
        let out = self.posterior.forward(tape, phi2, input)?;
        let mu = tape.cols(out, 0, d)?;
        let raw = tape.cols(out, d, 2 * d)?;
        let log_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, log_sigma))
    }

    /// Full pass over a B×D batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        stores: EncoderStores<'_>,
        adjacency: &DenseMatrix,
        x: Var,
    ) -> Result<EncoderOutput> {
        let z = self.encode(tape, stores.phi1, x)?;
        let (features, a_hat) = if self.use_rafa {
            let f = self.decompose(tape, stores.omega, z)?;
            let a = self.predict_attributes(tape, stores.omega, f, adjacency)?;
            (Some(f), Some(a))
        } else {
            (None, None)
        };
        let (mu, log_sigma) = self.aggregate(tape, stores.phi2, z, features, a_hat)?;
        Ok(EncoderOutput {
            z,
            features,
            a_hat,
            mu,
            log_sigma,
        })
    }

    /// Posterior means and log stds for a batch, without keeping the tape.
    pub fn posterior_batch(
        &self,
        stores: EncoderStores<'_>,
        adjacency: &DenseMatrix,
        x: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, stores, adjacency, xv)?;
        Ok((
            tape.value(out.mu).clone(),
            tape.value(out.log_sigma).clone(),
        ))
    }

    /// Posteriors of individual samples.
    pub fn posteriors(
        &self,
        stores: EncoderStores<'_>,
        adjacency: &DenseMatrix,
        x: &DenseMatrix,
    ) -> Result<Vec<VariationalPosterior>> {
        let (mu, ls) = self.posterior_batch(stores, adjacency, x)?;
        (0..mu.rows())
            .map(|r| VariationalPosterior::from_log_sigma(mu.row(r).to_vec(), ls.row(r)))
            .collect()
    }
}

/// Borrowed parameter stores of the encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderStores<'a> {
    pub phi1: &'a ParamStore,
    pub omega: &'a ParamStore,
    pub phi2: &'a ParamStore,
}
