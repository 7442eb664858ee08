//! The full set of networks and their parameter stores.

use serde::{Deserialize, Serialize};

use crate::ebm::EnergyHead;
use crate::encoder::{Encoder, EncoderDims, EncoderStores, VariationalPosterior};
use crate::error::{ensure, Result};
use crate::generator::Decoder;
use crate::numkit::{DenseMatrix, ParamStore, Rng};
use crate::uvos::OodDetector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input: usize,
    pub feat: usize,
    pub latent: usize,
    pub attrs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn encoder(&self) -> EncoderDims {
        EncoderDims {
            input: self.input,
            feat: self.feat,
            latent: self.latent,
            attrs: self.attrs,
            hidden: self.hidden,
        }
    }
}

/// Parameter stores, one per optimizer target.
#[derive(Debug, Clone, PartialEq)]
pub struct Stores {
    pub phi1: ParamStore,
    pub omega: ParamStore,
    pub phi2: ParamStore,
    pub alpha: ParamStore,
    pub theta: ParamStore,
    pub beta: ParamStore,
}

pub const STORE_TAGS: [&str; 6] = ["phi1", "omega", "phi2", "alpha", "theta", "beta"];

impl Stores {
    fn empty() -> Self {
        Self {
            phi1: ParamStore::new("phi1"),
            omega: ParamStore::new("omega"),
            phi2: ParamStore::new("phi2"),
            alpha: ParamStore::new("alpha"),
            theta: ParamStore::new("theta"),
            beta: ParamStore::new("beta"),
        }
    }

    pub fn encoder(&self) -> EncoderStores<'_> {
        EncoderStores {
            phi1: &self.phi1,
            omega: &self.omega,
            phi2: &self.phi2,
        }
    }

    pub fn all(&self) -> [&ParamStore; 6] {
        [
            &self.phi1,
            &self.omega,
            &self.phi2,
            &self.alpha,
            &self.theta,
            &self.beta,
        ]
    }

    pub fn all_mut(&mut self) -> [&mut ParamStore; 6] {
        [
            &mut self.phi1,
            &mut self.omega,
            &mut self.phi2,
            &mut self.alpha,
            &mut self.theta,
            &mut self.beta,
        ]
    }

    pub fn by_tag(&self, tag: &str) -> Option<&ParamStore> {
        self.all().into_iter().find(|s| s.tag() == tag)
    }

    pub fn by_tag_mut(&mut self, tag: &str) -> Option<&mut ParamStore> {
        self.all_mut().into_iter().find(|s| s.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub encoder: Encoder,
    pub head: EnergyHead,
    pub decoder: Decoder,
    pub detector: OodDetector,
    /// Normalized attribute adjacency used by the encoder.
    pub adjacency: DenseMatrix,
    pub stores: Stores,
}

impl Model {
    /// Architecture with empty stores.
    pub fn skeleton(dims: ModelDims, use_rafa: bool, adjacency: DenseMatrix) -> Result<Self> {
        ensure!(
            adjacency.shape() == (dims.attrs, dims.attrs),
            "adjacency is {:?}, expected {}x{}",
            adjacency.shape(),
            dims.attrs,
            dims.attrs
        );
        Ok(Self {
            dims,
            encoder: Encoder::new(dims.encoder(), use_rafa),
            head: EnergyHead::new(dims.latent, dims.classes)?,
            decoder: Decoder::new(dims.latent, dims.input),
            detector: OodDetector::new(dims.latent),
            adjacency,
            stores: Stores::empty(),
        })
    }

    pub fn new(
        dims: ModelDims,
        use_rafa: bool,
        adjacency: DenseMatrix,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut m = Self::skeleton(dims, use_rafa, adjacency)?;
        let s = &mut m.stores;
        m.encoder.init(&mut s.phi1, &mut s.omega, &mut s.phi2, rng);
        m.head.init(&mut s.alpha, rng);
        m.detector.init(&mut s.theta, rng);
        m.decoder.init(&mut s.beta, rng);
        Ok(m)
    }

    pub fn use_rafa(&self) -> bool {
        self.encoder.use_rafa
    }

    /// Posterior means and log stds for a batch of inputs.
    pub fn posterior_batch(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        self.encoder
            .posterior_batch(self.stores.encoder(), &self.adjacency, x)
    }

    pub fn posteriors(&self, x: &DenseMatrix) -> Result<Vec<VariationalPosterior>> {
        self.encoder
            .posteriors(self.stores.encoder(), &self.adjacency, x)
    }

    /// Class logits at the posterior mean.
    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let (mu, _) = self.posterior_batch(x)?;
        self.head.logits_batch(&self.stores.alpha, &mu)
    }
}

/// Stack feature rows into a matrix.
pub fn rows_to_matrix(rows: &[&[f64]]) -> Result<DenseMatrix> {
    ensure!(!rows.is_empty(), "cannot stack zero rows");
    DenseMatrix::from_rows(rows)
}
