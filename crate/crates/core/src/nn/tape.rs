//! Reverse-mode differentiation over a linear tape of rank-2 tensor ops.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;


use super::tensor::{log_softmax_slice, softmax_slice};
use super::{NeuralError, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-normalized sparse matrix used for graph message passing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, weight)` triples; duplicates are summed.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(self.cols, x.rows(), "spmm inner dims");
        let m = x.cols();
        let mut out = Tensor::zeros(self.rows, m);
        for &(r, c, w) in &self.entries {
            let src = x.row_slice(c);
            let dst = out.row_slice_mut(r);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        out
    }

    fn mul_dense_transposed(&self, g: &Tensor, acc: &mut Tensor) {
        for &(r, c, w) in &self.entries {
            let src = g.row_slice(r);
            let dst = acc.row_slice_mut(c);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for &(r, c, w) in &self.entries {
            let v = out.get(r, c);
            out.set(r, c, v + w);
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var, Option<Rc<[bool]>>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    LayerNorm(Var, Vec<f64>),
    SpMM(Rc<SparseMatrix>, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for a single backward pass. Not shareable across
/// threads; build one tape per worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

/// Parameter access for model forward passes: either tracked leaves
/// (training) or constants (frozen snapshot).
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn get(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(self.store, name, self.trainable)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every reachable trainable parameter, by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].clone().map(|g| (n.clone(), g)))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not part of any [`ParamStore`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = store.expect(name).clone();
        let v = self.push(t, Op::Leaf, trainable);
        self.bound.insert(name.to_string(), v);
        if trainable {
            self.trainable.push((name.to_string(), v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `[1, cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.len(), self.value(x).cols(), "add_row width");
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % cols];
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::AddRow(x, row), ng)
    }

    /// Multiplies every row of `x` elementwise by a `[1, cols]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.len(), self.value(x).cols(), "mul_row width");
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r.data()[i % cols];
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::MulRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).reshape(rows, cols);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols height");
            let c = t.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[off..off + c].copy_from_slice(t.row_slice(r));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let c = t.cols();
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let out = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(x);
        self.push(out, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let rows = t.rows();
        let mut out = Tensor::zeros(rows, len);
        for r in 0..rows {
            out.row_slice_mut(r).copy_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![idx.len(), c], data), Op::GatherRows(x, idx.to_vec()), ng)
    }

    /// Row-wise softmax. Masked (`false`) entries get probability 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        let c = t.cols();
        for r in 0..t.rows() {
            let m = mask.as_deref().map(|m| &m[r * c..(r + 1) * c]);
            softmax_slice(t.row_slice(r), m, out.row_slice_mut(r));
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Row-wise log-softmax. Masked entries are reported as 0 and must not be
    /// read as log-probabilities.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        let c = t.cols();
        for r in 0..t.rows() {
            let m = mask.as_deref().map(|m| &m[r * c..(r + 1) * c]);
            log_softmax_slice(t.row_slice(r), m, out.row_slice_mut(r));
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x, mask), ng)
    }

    /// Collects `x[r, c]` for each index pair into a `[1, k]` row.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Var {
        let t = self.value(x);
        let vals: Vec<f64> = at.iter().map(|&(r, c)| t.get(r, c)).collect();
        let ng = self.ng(x);
        self.push(Tensor::row(&vals), Op::Pick(x, at.to_vec()), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sq_norm();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = Tensor::zeros(t.rows(), c);
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_slice_mut(r).iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm(x, inv_std), ng)
    }

    pub fn spmm(&mut self, a: Rc<SparseMatrix>, x: Var) -> Var {
        let out = a.mul_dense(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::SpMM(a, x), ng)
    }

    /// Reverse pass from a `[1, 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NeuralError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NeuralError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (name, v) in &self.trainable {
            if let Some(g) = &grads[v.0] {
                if !g.is_finite() {
                    return Err(NeuralError::NonFiniteGradient(name.clone()));
                }
            }
        }
        Ok(Gradients { grads, params: self.trainable.clone() })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.ng(v) {
            return None;
        }
        let t = &self.nodes[v.0].value;
        Some(grads[v.0].get_or_insert_with(|| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()])))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let d = g.matmul(&self.value(*b).transpose());
                    self.acc(grads, *a).unwrap().add_assign(&d);
                }
                if self.ng(*b) {
                    let d = self.value(*a).transpose().matmul(g);
                    self.acc(grads, *b).unwrap().add_assign(&d);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(&g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y);
                    self.acc(grads, *a).unwrap().add_assign(&d);
                }
                if self.ng(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y);
                    self.acc(grads, *b).unwrap().add_assign(&d);
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    let c = g.cols();
                    for (k, v) in g.data().iter().enumerate() {
                        gr.data_mut()[k % c] += v;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let c = g.cols();
                if self.ng(*x) {
                    let r = self.value(*row).data();
                    let gx = self.acc(grads, *x).unwrap();
                    for (k, (d, v)) in gx.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *d += v * r[k % c];
                    }
                }
                if self.ng(*row) {
                    let xv = self.value(*x).data();
                    let gr = self.acc(grads, *row).unwrap();
                    for (k, v) in g.data().iter().enumerate() {
                        gr.data_mut()[k % c] += v * xv[k];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += v * s;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, v), yy) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += v * (1.0 - yy * yy);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, v), xx) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *xx > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, v), &xx) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        let t = (GELU_C * (xx + GELU_K * xx * xx * xx)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xx * xx);
                        *d += v * (0.5 * (1.0 + t) + 0.5 * xx * dt);
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(&g.transpose());
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        for (d, v) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *d += v;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..g.rows() {
                            let src = &g.row_slice(r)[off..off + c];
                            for (d, v) in gp.row_slice_mut(r).iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(x, start) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = gx.cols();
                    let dst = &mut gx.data_mut()[start * c..start * c + g.len()];
                    for (d, v) in dst.iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let len = g.cols();
                    for r in 0..g.rows() {
                        let dst = &mut gx.row_slice_mut(r)[*start..start + len];
                        for (d, v) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &row) in idx.iter().enumerate() {
                        for (d, v) in gx.row_slice_mut(row).iter_mut().zip(g.row_slice(k)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yy), gg) in gx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x, mask) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = y.cols();
                    for r in 0..y.rows() {
                        let m = mask.as_deref().map(|m| &m[r * c..(r + 1) * c]);
                        let allowed = |j: usize| m.map_or(true, |m| m[j]);
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let total: f64 = (0..c).filter(|&j| allowed(j)).map(|j| gr[j]).sum();
                        let dst = gx.row_slice_mut(r);
                        for j in 0..c {
                            if allowed(j) {
                                dst[j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Pick(x, at) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = gx.cols();
                    for (k, &(r, col)) in at.iter().enumerate() {
                        gx.data_mut()[r * c + col] += g.data()[k];
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let s = g.item() / n;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumSquares(x) => {
                let s = g.item();
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, v) in gx.data_mut().iter_mut().zip(xv) {
                        *d += 2.0 * v * s;
                    }
                }
            }
            Op::LayerNorm(x, inv_std) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = y.cols() as f64;
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let mean_g = gr.iter().sum::<f64>() / c;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                        let is = inv_std[r];
                        for ((d, gg), yy) in gx.row_slice_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d += is * (gg - mean_g - yy * mean_gy);
                        }
                    }
                }
            }
            Op::SpMM(a, x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    a.mul_dense_transposed(g, gx);
                }
            }
        }
    }
}
