use std::collections::BTreeMap;

use super::tape::{Gradients, Tape};
use super::{DenseMatrix, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

/// Named trainable arrays with gradient slots. The `tag` identifies the
/// store on a [`Tape`] so gradients can be routed back after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tag: String,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) {
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        self.entries.insert(name.into(), Param { value, grad });
    }

    /// Gaussian init with standard deviation `scale`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut Rng,
    ) {
        let mut m = rng.normal_matrix(rows, cols);
        m.data_mut().iter_mut().for_each(|v| *v *= scale);
        self.insert(name, m);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("parameter `{}.{name}` not found", self.tag)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let tag = &self.tag;
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("parameter `{tag}.{name}` not found")))
    }

    pub fn value(&self, name: &str) -> Result<&DenseMatrix> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add gradients of every leaf on `tape` that was bound to this store.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        let tag = self.tag.clone();
        for (name, var) in tape.bindings_for(&tag) {
            if let Some(g) = grads.wrt(var)? {
                let p = self.get_mut(name)?;
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Flat copy of all values in name order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// Coordinate addressed by flat index (name order).
    pub(crate) fn locate(&self, mut flat: usize) -> Option<(&str, usize)> {
        for (name, p) in &self.entries {
            if flat < p.value.len() {
                return Some((name, flat));
            }
            flat -= p.value.len();
        }
        None
    }

    pub(crate) fn value_at_mut(&mut self, flat: usize) -> Option<&mut f64> {
        let (name, i) = self.locate(flat).map(|(n, i)| (n.to_string(), i))?;
        self.entries
            .get_mut(&name)
            .map(|p| &mut p.value.data_mut()[i])
    }

    /// Bit-level fingerprint of all values, for freeze/isolation checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.entries {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in p.value.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}
