use super::{DenseMatrix, ParamStore, Rng, Tape, Var};
use crate::error::{ensure, Result};

/// Fully connected network: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: &[usize]) -> Self {
        assert!(
            sizes.len() >= 2,
            "an MLP needs at least input and output sizes"
        );
        Self {
            prefix: prefix.into(),
            sizes: sizes.to_vec(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            store.insert_normal(
                self.weight_name(l),
                fan_in,
                fan_out,
                (1.0 / fan_in as f64).sqrt(),
                rng,
            );
            store.insert(self.bias_name(l), DenseMatrix::zeros(1, fan_out));
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        ensure!(
            tape.value(x).cols() == self.input_size(),
            "{}: input width {} (expected {})",
            self.prefix,
            tape.value(x).cols(),
            self.input_size()
        );
        let mut h = x;
        for l in 0..self.layers() {
            let w = tape.param(store, &self.weight_name(l))?;
            let b = tape.param(store, &self.bias_name(l))?;
            let lin = tape.matmul(h, w)?;
            h = tape.add_bias(lin, b)?;
            if l + 1 < self.layers() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Same computation without recording.
    pub fn forward_plain(&self, store: &ParamStore, x: &DenseMatrix) -> Result<DenseMatrix> {
        ensure!(
            x.cols() == self.input_size(),
            "{}: input width {} (expected {})",
            self.prefix,
            x.cols(),
            self.input_size()
        );
        let mut h = x.clone();
        for l in 0..self.layers() {
            let w = store.value(&self.weight_name(l))?;
            let b = store.value(&self.bias_name(l))?;
            ensure!(
                w.rows() == h.cols() && b.cols() == w.cols(),
                "{}: layer {l} has inconsistent shape",
                self.prefix
            );
            h = h.matmul_unchecked(w);
            let last = l + 1 == self.layers();
            for r in 0..h.rows() {
                for (v, bb) in h.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                    if !last {
                        *v = v.tanh();
                    }
                }
            }
        }
        Ok(h)
    }
}

/// Forward pass of a single vector through `net`.
pub fn mlp_forward(store: &ParamStore, x: &[f64], net: &Mlp) -> Result<Vec<f64>> {
    Ok(net
        .forward_plain(store, &DenseMatrix::row_vector(x))?
        .into_vec())
}
