//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records every operation of one computation. `backward` walks
//! the records in reverse and returns a [`Gradients`] table; leaves created
//! with [`Tape::param`] are bound to a [`ParamStore`] tag so the store can
//! pull its gradients with [`ParamStore::accumulate`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::{DenseMatrix, ParamStore};
use crate::error::{ensure, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Probability clamp used by the binary cross-entropy node.
pub const BCE_CLAMP: f64 = 1e-7;
/// Floor inside logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Exp(usize),
    Sigmoid(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    MeanAll(usize),
    RowSum(usize),
    RowLogSumExp(usize),
    SoftmaxRows(usize),
    Cols(usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    Reshape(usize),
    NodeMix(usize, DenseMatrix),
    GroupedMatMul(usize, usize, usize),
    ScaleNodes(usize, usize),
    CrossEntropy(usize, Vec<usize>),
    Bce(usize, DenseMatrix),
    ClassEntropyContrast(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bindings: Vec<(String, String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (`None` if `v` does not
    /// influence the loss).
    pub fn wrt(&self, v: Var) -> Result<Option<&DenseMatrix>> {
        if v.tape != self.tape {
            return Err(Error::state("variable belongs to a different tape"));
        }
        Ok(self.grads.get(v.idx).and_then(|g| g.as_ref()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-p ln p` with the log floored.
fn class_entropy(p: f64) -> f64 {
    -p * p.max(LOG_FLOOR).ln()
}

fn class_entropy_grad(p: f64) -> f64 {
    if p <= LOG_FLOOR {
        -LOG_FLOOR.ln()
    } else {
        -p.ln() - 1.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::state("variable is not recorded on this tape"));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub(crate) fn bindings_for<'a>(
        &'a self,
        tag: &'a str,
    ) -> impl Iterator<Item = (&'a str, Var)> + 'a {
        self.bindings
            .iter()
            .filter(move |(t, _, _)| t == tag)
            .map(move |(_, name, idx)| {
                (
                    name.as_str(),
                    Var {
                        tape: self.id,
                        idx: *idx,
                    },
                )
            })
    }

    /// Leaf holding data; its gradient is available from [`Gradients::wrt`].
    pub fn input(&mut self, m: DenseMatrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf bound to `store.name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.bindings
            .push((store.tag().to_string(), name.to_string(), v.idx));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        ensure!(sa == sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "add")?;
        let out = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "sub")?;
        let out = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mul")?;
        let out = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    /// `a + 1·bias` with `bias` a 1×cols row broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        ensure!(
            bv.rows() == 1 && bv.cols() == av.cols(),
            "add_bias: bias {:?} does not broadcast over {:?}",
            bv.shape(),
            av.shape()
        );
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| c * x);
        Ok(self.push(out, Op::Scale(ia, c)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        Ok(self.push(out, Op::Tanh(ia)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::exp);
        Ok(self.push(out, Op::Exp(ia)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(ia)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x * x);
        Ok(self.push(out, Op::Square(ia)))
    }

    /// Elementwise clamp; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x.clamp(lo, hi));
        Ok(self.push(out, Op::Clamp(ia, lo, hi)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = DenseMatrix::scalar(self.nodes[ia].value.sum());
        Ok(self.push(out, Op::SumAll(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        ensure!(!v.is_empty(), "mean of an empty matrix");
        let out = DenseMatrix::scalar(v.sum() / v.len() as f64);
        Ok(self.push(out, Op::MeanAll(ia)))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = DenseMatrix::from_vec(v.rows(), 1, data)?;
        Ok(self.push(out, Op::RowSum(ia)))
    }

    /// Per-row log Σ exp, as a rows×1 column.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        ensure!(v.cols() > 0, "logsumexp over an empty row");
        let data = (0..v.rows()).map(|r| row_lse(v.row(r))).collect();
        let out = DenseMatrix::from_vec(v.rows(), 1, data)?;
        Ok(self.push(out, Op::RowLogSumExp(ia)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let mut out = v.clone();
        for r in 0..out.rows() {
            let lse = row_lse(v.row(r));
            out.row_mut(r)
                .iter_mut()
                .for_each(|x| *x = (*x - lse).exp());
        }
        Ok(self.push(out, Op::SoftmaxRows(ia)))
    }

    /// Columns `[start, end)`.
    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        ensure!(
            start <= end && end <= v.cols(),
            "column range {start}..{end} out of {}",
            v.cols()
        );
        let out = v.cols_range(start, end);
        Ok(self.push(out, Op::Cols(ia, start)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        ensure!(av.rows() == bv.rows(), "concat_cols: row counts differ");
        let mut out = DenseMatrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        Ok(self.push(out, Op::ConcatCols(ia, ib)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        ensure!(av.cols() == bv.cols(), "concat_rows: column counts differ");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = DenseMatrix::from_vec(av.rows() + bv.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::ConcatRows(ia, ib)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone().reshaped(rows, cols)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    /// Graph propagation per sample. `a` is B×(M·f), read as M node rows of
    /// width f per sample; output node i is Σ_j adj[i,j]·node_j.
    pub fn node_mix(&mut self, a: Var, adj: &DenseMatrix) -> Result<Var> {
        let ia = self.idx(a)?;
        let m = adj.rows();
        ensure!(adj.cols() == m, "adjacency must be square");
        let v = &self.nodes[ia].value;
        ensure!(
            m > 0 && v.cols() % m == 0,
            "node_mix: width {} not divisible by {m} nodes",
            v.cols()
        );
        let f = v.cols() / m;
        let mut out = DenseMatrix::zeros(v.rows(), v.cols());
        for b in 0..v.rows() {
            let src = v.row(b);
            let dst = out.row_mut(b);
            for i in 0..m {
                for j in 0..m {
                    let w = adj.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..f {
                        dst[i * f + k] += w * src[j * f + k];
                    }
                }
            }
        }
        Ok(self.push(out, Op::NodeMix(ia, adj.clone())))
    }

    /// Independent linear map per group: `x` is B×(G·f_in), `w` stacks G
    /// blocks of f_in×f_out; output block g is `x_g · w_g`.
    pub fn grouped_matmul(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (xv, wv) = (&self.nodes[ix].value, &self.nodes[iw].value);
        ensure!(
            groups > 0 && xv.cols() % groups == 0,
            "grouped_matmul: width {} not divisible by {groups}",
            xv.cols()
        );
        let f_in = xv.cols() / groups;
        ensure!(
            wv.rows() == groups * f_in,
            "grouped_matmul: weight rows {} != {groups}x{f_in}",
            wv.rows()
        );
        let f_out = wv.cols();
        let mut out = DenseMatrix::zeros(xv.rows(), groups * f_out);
        for b in 0..xv.rows() {
            let xr = xv.row(b);
            let or = out.row_mut(b);
            for g in 0..groups {
                for i in 0..f_in {
                    let a = xr[g * f_in + i];
                    let wr = wv.row(g * f_in + i);
                    for (o, w) in or[g * f_out..(g + 1) * f_out].iter_mut().zip(wr) {
                        *o += a * w;
                    }
                }
            }
        }
        Ok(self.push(out, Op::GroupedMatMul(ix, iw, groups)))
    }

    /// Scale node block m of each sample row by `s[b, m]`.
    pub fn scale_nodes(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.idx(s)?);
        let (xv, sv) = (&self.nodes[ix].value, &self.nodes[is].value);
        let m = sv.cols();
        ensure!(
            xv.rows() == sv.rows() && m > 0 && xv.cols() % m == 0,
            "scale_nodes: {:?} incompatible with scales {:?}",
            xv.shape(),
            sv.shape()
        );
        let f = xv.cols() / m;
        let mut out = xv.clone();
        for b in 0..xv.rows() {
            let row = out.row_mut(b);
            for node in 0..m {
                let c = sv.get(b, node);
                row[node * f..(node + 1) * f]
                    .iter_mut()
                    .for_each(|v| *v *= c);
            }
        }
        Ok(self.push(out, Op::ScaleNodes(ix, is)))
    }

    /// Per-row `logsumexp(logits) - logits[label]` as a B×1 column.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let v = &self.nodes[il].value;
        ensure!(
            labels.len() == v.rows(),
            "cross_entropy: {} labels for {} rows",
            labels.len(),
            v.rows()
        );
        let mut data = Vec::with_capacity(v.rows());
        for (r, &y) in labels.iter().enumerate() {
            ensure!(
                y < v.cols(),
                "label {y} out of range for {} classes",
                v.cols()
            );
            data.push(row_lse(v.row(r)) - v.get(r, y));
        }
        let out = DenseMatrix::from_vec(v.rows(), 1, data)?;
        Ok(self.push(out, Op::CrossEntropy(il, labels.to_vec())))
    }

    /// Per-row mean binary cross-entropy of probabilities against 0/1
    /// targets, probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, probs: Var, targets: &DenseMatrix) -> Result<Var> {
        let ip = self.idx(probs)?;
        let v = &self.nodes[ip].value;
        ensure!(
            v.shape() == targets.shape(),
            "bce: shape {:?} vs targets {:?}",
            v.shape(),
            targets.shape()
        );
        ensure!(v.cols() > 0, "bce over zero attributes");
        let n = v.cols() as f64;
        let mut data = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let s: f64 = v
                .row(r)
                .iter()
                .zip(targets.row(r))
                .map(|(&p, &a)| {
                    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -(a * p.ln() + (1.0 - a) * (1.0 - p).ln())
                })
                .sum();
            data.push(s / n);
        }
        let out = DenseMatrix::from_vec(v.rows(), 1, data)?;
        Ok(self.push(out, Op::Bce(ip, targets.clone())))
    }

    /// Class-coupled entropy contrast on a B×K probability batch:
    /// mean_i CH(p̄)[y_i] - mean_i CH(p_i)[y_i] with CH(p)[k] = -p_k ln p_k
    /// and p̄ the batch-mean probability vector. Returns a 1×1 node.
    pub fn class_entropy_contrast(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ip = self.idx(probs)?;
        let v = &self.nodes[ip].value;
        ensure!(v.rows() > 0, "class entropy contrast over an empty batch");
        ensure!(
            labels.len() == v.rows(),
            "{} labels for {} rows",
            labels.len(),
            v.rows()
        );
        ensure!(labels.iter().all(|&y| y < v.cols()), "label out of range");
        let mean = v.column_means();
        let b = v.rows() as f64;
        let mut marginal = 0.0;
        let mut conditional = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            marginal += class_entropy(mean.data()[y]);
            conditional += class_entropy(v.get(r, y));
        }
        let out = DenseMatrix::scalar((marginal - conditional) / b);
        Ok(self.push(out, Op::ClassEntropyContrast(ip, labels.to_vec())))
    }

    /// Reverse accumulation from a 1×1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        ensure!(
            self.nodes[il].value.shape() == (1, 1),
            "backward requires a scalar loss, got {:?}",
            self.nodes[il].value.shape()
        );
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; il + 1];
        grads[il] = Some(DenseMatrix::scalar(1.0));

        fn acc(grads: &mut [Option<DenseMatrix>], i: usize, g: DenseMatrix) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    acc(&mut grads, *a, g.matmul_t(bv));
                    acc(&mut grads, *b, av.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y)?);
                    acc(&mut grads, *b, g.zip_map(av, |x, y| x * y)?);
                }
                Op::AddBias(a, bias) => {
                    acc(
                        &mut grads,
                        *bias,
                        g.column_means().map(|x| x * g.rows() as f64),
                    );
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| c * x)),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(out, |x, t| x * (1.0 - t * t))?),
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(out, |x, e| x * e)?),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s))?),
                Op::Square(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(av, |x, v| 2.0 * v * x)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[*a].value;
                    let ga = g.zip_map(av, |x, v| if v < *lo || v > *hi { 0.0 } else { x })?;
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    acc(&mut grads, *a, DenseMatrix::filled(r, c, g.data()[0]));
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    acc(
                        &mut grads,
                        *a,
                        DenseMatrix::filled(r, c, g.data()[0] / (r * c) as f64),
                    );
                }
                Op::RowSum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for row in 0..r {
                        let gv = g.data()[row];
                        ga.row_mut(row).iter_mut().for_each(|x| *x = gv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowLogSumExp(a) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                    for row in 0..av.rows() {
                        let lse = out.data()[row];
                        let gv = g.data()[row];
                        for (o, x) in ga.row_mut(row).iter_mut().zip(av.row(row)) {
                            *o = gv * (x - lse).exp();
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = DenseMatrix::zeros(out.rows(), out.cols());
                    for row in 0..out.rows() {
                        let p = out.row(row);
                        let gr = g.row(row);
                        let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for (o, (p, g)) in ga.row_mut(row).iter_mut().zip(p.iter().zip(gr)) {
                            *o = p * (g - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Cols(a, start) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    acc(&mut grads, *a, g.cols_range(0, ca));
                    acc(&mut grads, *b, g.cols_range(ca, g.cols()));
                }
                Op::ConcatRows(a, b) => {
                    let (ra, c) = self.nodes[*a].value.shape();
                    let rb = self.nodes[*b].value.rows();
                    let ga = DenseMatrix::from_vec(ra, c, g.data()[..ra * c].to_vec())?;
                    let gb = DenseMatrix::from_vec(rb, c, g.data()[ra * c..].to_vec())?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    acc(&mut grads, *a, g.reshaped(r, c)?);
                }
                Op::NodeMix(a, adj) => {
                    let m = adj.rows();
                    let f = g.cols() / m;
                    let mut ga = DenseMatrix::zeros(g.rows(), g.cols());
                    for b in 0..g.rows() {
                        let src = g.row(b);
                        let dst = ga.row_mut(b);
                        for i in 0..m {
                            for j in 0..m {
                                let w = adj.get(i, j);
                                if w == 0.0 {
                                    continue;
                                }
                                for k in 0..f {
                                    dst[j * f + k] += w * src[i * f + k];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GroupedMatMul(x, w, groups) => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let f_in = xv.cols() / groups;
                    let f_out = wv.cols();
                    let mut gx = DenseMatrix::zeros(xv.rows(), xv.cols());
                    let mut gw = DenseMatrix::zeros(wv.rows(), wv.cols());
                    for b in 0..xv.rows() {
                        let xr = xv.row(b);
                        let gr = g.row(b);
                        for grp in 0..*groups {
                            let go = &gr[grp * f_out..(grp + 1) * f_out];
                            for i in 0..f_in {
                                let row = grp * f_in + i;
                                let wr = wv.row(row);
                                gx.row_mut(b)[row] = wr.iter().zip(go).map(|(w, g)| w * g).sum();
                                let a = xr[row];
                                for (o, g) in gw.row_mut(row).iter_mut().zip(go) {
                                    *o += a * g;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::ScaleNodes(x, s) => {
                    let xv = &self.nodes[*x].value;
                    let sv = &self.nodes[*s].value;
                    let m = sv.cols();
                    let f = xv.cols() / m;
                    let mut gx = g.clone();
                    let mut gs = DenseMatrix::zeros(sv.rows(), m);
                    for b in 0..xv.rows() {
                        for node in 0..m {
                            let c = sv.get(b, node);
                            let span = node * f..(node + 1) * f;
                            let dot: f64 = g.row(b)[span.clone()]
                                .iter()
                                .zip(&xv.row(b)[span.clone()])
                                .map(|(g, x)| g * x)
                                .sum();
                            gs.set(b, node, dot);
                            gx.row_mut(b)[span].iter_mut().for_each(|v| *v *= c);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *s, gs);
                }
                Op::CrossEntropy(a, labels) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                    for (row, &y) in labels.iter().enumerate() {
                        let lse = row_lse(av.row(row));
                        let gv = g.data()[row];
                        for (k, (o, x)) in ga.row_mut(row).iter_mut().zip(av.row(row)).enumerate() {
                            let ind = if k == y { 1.0 } else { 0.0 };
                            *o = gv * ((x - lse).exp() - ind);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Bce(a, targets) => {
                    let av = &self.nodes[*a].value;
                    let n = av.cols() as f64;
                    let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                    for row in 0..av.rows() {
                        let gv = g.data()[row] / n;
                        for ((o, &p), &t) in ga
                            .row_mut(row)
                            .iter_mut()
                            .zip(av.row(row))
                            .zip(targets.row(row))
                        {
                            *o = if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                gv * (-t / p + (1.0 - t) / (1.0 - p))
                            };
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ClassEntropyContrast(a, labels) => {
                    let av = &self.nodes[*a].value;
                    let (rows, k) = av.shape();
                    let b = rows as f64;
                    let mean = av.column_means();
                    let mut counts = vec![0.0; k];
                    for &y in labels {
                        counts[y] += 1.0;
                    }
                    let gv = g.data()[0];
                    let mut ga = DenseMatrix::zeros(rows, k);
                    for (row, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let mut d = counts[c] / b * class_entropy_grad(mean.data()[c]) / b;
                            if c == y {
                                d -= class_entropy_grad(av.get(row, c)) / b;
                            }
                            ga.set(row, c, gv * d);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::new("w");
        store.insert("w", DenseMatrix::row_vector(&[3.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&tape, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[6.0]);
        // repeated accumulation without zeroing adds up
        store.accumulate(&tape, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[12.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax_outer_product() {
        // loss = lse(W x) for a single x; dL/dW = softmax(Wx) xᵀ (W stored in×out)
        let x = DenseMatrix::row_vector(&[0.5, -1.0, 2.0]);
        let mut store = ParamStore::new("p");
        let w = DenseMatrix::from_vec(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        store.insert("w", w.clone());
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let wv = tape.param(&store, "w").unwrap();
        let logits = tape.matmul(xv, wv).unwrap();
        let lse = tape.row_logsumexp(logits).unwrap();
        let loss = tape.sum(lse).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(wv).unwrap().unwrap();

        let l = x.matmul(&w).unwrap();
        let m = l.data().iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = l.data().iter().map(|v| (v - m).exp()).sum();
        let p: Vec<f64> = l.data().iter().map(|v| (v - m).exp() / z).collect();
        for i in 0..3 {
            for k in 0..2 {
                let expected = x.data()[i] * p[k];
                assert!((g.get(i, k) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn foreign_variable_is_a_state_error() {
        let mut a = Tape::new();
        let b = Tape::new();
        let v = a.input(DenseMatrix::scalar(1.0));
        assert!(matches!(b.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let v = t.input(DenseMatrix::zeros(2, 2));
        assert!(t.backward(v).is_err());
    }
}
