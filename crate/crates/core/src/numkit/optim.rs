use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DenseMatrix, ParamStore};

/// Adaptive-moment optimizer with decoupled weight decay, one instance per
/// parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub first: BTreeMap<String, DenseMatrix>,
    pub second: BTreeMap<String, DenseMatrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |p: &super::params::Param| DenseMatrix::zeros(p.value.rows(), p.value.cols());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: store.iter().map(|(n, p)| (n.clone(), zeros(p))).collect(),
            second: store.iter().map(|(n, p)| (n.clone(), zeros(p))).collect(),
        }
    }

    /// One update from the gradients held in `store`. A zero rate leaves
    /// values untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let m = self
                .first
                .get_mut(name)
                .expect("moment buffer per parameter");
            let v = self
                .second
                .get_mut(name)
                .expect("moment buffer per parameter");
            for (((x, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                if lr != 0.0 {
                    let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    *x -= lr * (update + self.weight_decay * *x);
                }
            }
        }
    }
}
