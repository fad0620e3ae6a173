//! Dense rank-2 tensors and a reverse-mode tape.
//!
//! Every quantity the model touches is a matrix or a row vector, so the
//! tensor type is fixed at rank 2 (a row vector is `1×d`, a scalar `1×1`).
//! Forward operations are recorded on a [`Tape`] in execution order; the
//! backward pass replays the tape in reverse, visiting each node once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default epsilon added to the variance in [`Tape::layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probability floor used by [`Tape::cross_entropy`] to avoid `ln(0)`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensors are at most rank 2, got rank {0}")]
    Rank(usize),
    #[error("buffer of length {len} does not fill a {rows}x{cols} tensor")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from an arbitrary shape; ranks above two are rejected.
    pub fn from_shape(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        match *shape {
            [] => Self::new(1, 1, data),
            [n] => Self::new(1, n, data),
            [r, c] => Self::new(r, c, data),
            _ => Err(TensorError::Rank(shape.len())),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input, so this is
    /// meant for literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let a = self.data[i * k + t];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[t * n..(t + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Rows re-ordered so that output row `i` is input row `order[i]`.
    pub fn select_rows(&self, order: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    ConcatRows(Var, Var),
    MeanRows(Var),
    SumAll(Var),
    CosineMatrix { x: Var, y: Var, x_norm: Vec<f64>, y_norm: Vec<f64> },
    MaxRows { input: Var, argmax: Vec<usize> },
    TopKMeanRows { input: Var, picked: Vec<Vec<usize>> },
    CrossEntropy { input: Var, label: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::MulElem(..) => "mul_elem",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::SumAll(_) => "sum_all",
            Op::CosineMatrix { .. } => "cosine_matrix",
            Op::MaxRows { .. } => "max_rows",
            Op::TopKMeanRows { .. } => "topk_mean_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in execution order, so the record is always a valid
/// topological order. Gradients of leaves created with [`Tape::param`]
/// accumulate across [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    sign_flip: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates the backward contribution of every node of the named op.
    /// Mutation hook for checking that gradient checks catch broken rules.
    #[cfg(any(test, feature = "fault-injection"))]
    pub fn inject_sign_flip(&mut self, op: &'static str) {
        self.sign_flip = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose trainability is decided by the caller.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node; `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient, or zeros shaped like the node.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.shape(v);
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::Shape {
                op: "add",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::Shape {
                op: "mul_elem",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows, x.cols, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MulElem(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols == 0 {
            return Err(TensorError::Contract("softmax_rows: rows must be nonempty".into()));
        }
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if x.cols < 2 {
            return Err(TensorError::Contract(format!(
                "layer_norm_rows: need at least 2 columns, got {}",
                x.cols
            )));
        }
        if !(eps >= 0.0) {
            return Err(TensorError::Domain {
                op: "layer_norm_rows",
                msg: format!("eps must be nonnegative, got {eps}"),
            });
        }
        let d = x.cols as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for row in out.data.chunks_mut(x.cols) {
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(TensorError::Domain {
                    op: "layer_norm_rows",
                    msg: "zero-variance row with eps = 0".into(),
                });
            }
            let s = 1.0 / denom.sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LayerNormRows { input: a, inv_std }, rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.cols {
            return Err(TensorError::Shape {
                op: "concat_rows",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let mut data = Vec::with_capacity(x.len() + y.len());
        data.extend_from_slice(&x.data);
        data.extend_from_slice(&y.data);
        let out = Tensor::new(x.rows + y.rows, x.cols, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Column means: `m×d -> 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows == 0 {
            return Err(TensorError::Contract("mean_rows: no rows".into()));
        }
        let mut out = vec![0.0; x.cols];
        for row in x.data.chunks(x.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let m = x.rows as f64;
        out.iter_mut().for_each(|v| *v /= m);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(a), rg))
    }

    /// Sum of every entry, as a `1×1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Pairwise cosine similarity between the rows of `x` (m×d) and `y`
    /// (n×d), giving an m×n matrix.
    pub fn cosine_matrix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.cols != yv.cols {
            return Err(TensorError::Shape {
                op: "cosine",
                left: xv.shape(),
                right: yv.shape(),
            });
        }
        let norms = |t: &Tensor| -> Result<Vec<f64>> {
            t.data
                .chunks(t.cols.max(1))
                .map(|r| {
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 && n.is_finite() {
                        Ok(n)
                    } else {
                        Err(TensorError::Domain {
                            op: "cosine",
                            msg: "zero-norm input row".into(),
                        })
                    }
                })
                .collect()
        };
        let x_norm = norms(xv)?;
        let y_norm = norms(yv)?;
        let (m, n) = (xv.rows, yv.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(xv.row(i), yv.row(j)) / (x_norm[i] * y_norm[j]);
            }
        }
        let out = Tensor::new(m, n, out)?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(
            out,
            Op::CosineMatrix {
                x,
                y,
                x_norm,
                y_norm,
            },
            rg,
        ))
    }

    /// Cosine similarity of two `1×d` row vectors as a `1×1` node.
    pub fn cosine(&mut self, x: Var, y: Var) -> Result<Var> {
        for v in [x, y] {
            if self.shape(v).0 != 1 {
                return Err(TensorError::Shape {
                    op: "cosine",
                    left: self.shape(x),
                    right: self.shape(y),
                });
            }
        }
        self.cosine_matrix(x, y)
    }

    /// Column-wise maximum over rows: `m×n -> 1×n`. Ties go to the lowest
    /// row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows == 0 {
            return Err(TensorError::Contract("max_rows: no rows".into()));
        }
        let mut argmax = vec![0usize; x.cols];
        let mut out = x.row(0).to_vec();
        for r in 1..x.rows {
            for (c, v) in x.row(r).iter().enumerate() {
                if *v > out[c] {
                    out[c] = *v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(out), Op::MaxRows { input: a, argmax }, rg))
    }

    /// Column-wise mean of the `k` largest entries: `m×n -> 1×n`.
    /// Requires `1 <= k <= m`; ties keep the lower row index first.
    pub fn topk_mean_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let x = self.value(a);
        if k == 0 || k > x.rows {
            return Err(TensorError::Contract(format!(
                "topk_mean_rows: k = {k} outside 1..={}",
                x.rows
            )));
        }
        let mut out = Vec::with_capacity(x.cols);
        let mut picked = Vec::with_capacity(x.cols);
        let mut idx: Vec<usize> = (0..x.rows).collect();
        for c in 0..x.cols {
            idx.sort_by(|&p, &q| x.get(q, c).total_cmp(&x.get(p, c)).then(p.cmp(&q)));
            let top = idx[..k].to_vec();
            out.push(top.iter().map(|&r| x.get(r, c)).sum::<f64>() / k as f64);
            picked.push(top);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(out), Op::TopKMeanRows { input: a, picked }, rg))
    }

    /// `-ln max(p[label], PROB_FLOOR)` for a `1×C` probability row.
    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let pv = self.value(p);
        if pv.rows != 1 {
            return Err(TensorError::Contract(format!(
                "cross_entropy: expected a 1xC probability row, got {:?}",
                pv.shape()
            )));
        }
        if label >= pv.cols {
            return Err(TensorError::Contract(format!(
                "cross_entropy: label {label} out of range for {} classes",
                pv.cols
            )));
        }
        let total: f64 = pv.data.iter().sum();
        if pv.data.iter().any(|v| *v < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                msg: format!("input is not a probability vector (sum {total})"),
            });
        }
        let loss = -pv.data[label].max(PROB_FLOOR).ln();
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { input: p, label }, rg))
    }

    /// Reverse pass from a scalar node. Gradients are added to whatever the
    /// tape already holds.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward: empty tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::Contract(format!(
                "backward: loss must be 1x1, got {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if self.grads.len() < self.nodes.len() {
                        self.grads.resize(self.nodes.len(), None);
                    }
                    match &mut self.grads[idx] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
                op => {
                    let mut contributions = self.local_grads(op, &node.value, &g)?;
                    if self.sign_flip == Some(op.name()) {
                        for (_, c) in &mut contributions {
                            c.data.iter_mut().for_each(|v| *v = -*v);
                        }
                    }
                    for (var, contrib) in contributions {
                        if !self.nodes[var.0].requires_grad {
                            continue;
                        }
                        match &mut local[var.0] {
                            Some(acc) => acc.add_assign(&contrib),
                            slot => *slot = Some(contrib),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let grads = match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut v = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    v.push((*a, g.matmul(&bv.transpose())?));
                }
                if self.requires_grad(*b) {
                    v.push((*b, av.transpose().matmul(g)?));
                }
                v
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::MulElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = zip_map(g, bv, |x, y| x * y);
                let gb = zip_map(g, av, |x, y| x * y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.data.iter_mut().for_each(|v| *v *= s);
                vec![(*a, ga)]
            }
            Op::Tanh(a) => vec![(*a, zip_map(g, out, |gv, y| gv * (1.0 - y * y)))],
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for (grow, yrow) in ga.data.chunks_mut(out.cols).zip(out.data.chunks(out.cols)) {
                    let inner = dot(grow, yrow);
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - inner);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNormRows { input, inv_std } => {
                let d = out.cols as f64;
                let mut ga = g.clone();
                for ((grow, yrow), s) in ga
                    .data
                    .chunks_mut(out.cols)
                    .zip(out.data.chunks(out.cols))
                    .zip(inv_std)
                {
                    let mean_g = grow.iter().sum::<f64>() / d;
                    let mean_gy = dot(grow, yrow) / d;
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = s * (*gv - mean_g - y * mean_gy);
                    }
                }
                vec![(*input, ga)]
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                let (ra, ca) = self.shape(*a);
                let (rb, cb) = self.shape(*b);
                let ga = Tensor::new(ra, ca, g.data[..split].to_vec())?;
                let gb = Tensor::new(rb, cb, g.data[split..].to_vec())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::MeanRows(a) => {
                let (m, d) = self.shape(*a);
                let mut ga = Tensor::zeros(m, d);
                let inv = 1.0 / m as f64;
                for row in ga.data.chunks_mut(d) {
                    for (o, gv) in row.iter_mut().zip(&g.data) {
                        *o = gv * inv;
                    }
                }
                vec![(*a, ga)]
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, Tensor::filled(r, c, g.item()))]
            }
            Op::CosineMatrix {
                x,
                y,
                x_norm,
                y_norm,
            } => {
                let xv = self.value(*x);
                let yv = self.value(*y);
                let (m, n, d) = (xv.rows, yv.rows, xv.cols);
                let mut gx = Tensor::zeros(m, d);
                let mut gy = Tensor::zeros(n, d);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let c = out.get(i, j);
                        let inv = 1.0 / (x_norm[i] * y_norm[j]);
                        let cx = c / (x_norm[i] * x_norm[i]);
                        let cy = c / (y_norm[j] * y_norm[j]);
                        let (xi, yj) = (xv.row(i), yv.row(j));
                        for t in 0..d {
                            gx.data[i * d + t] += gij * (yj[t] * inv - cx * xi[t]);
                            gy.data[j * d + t] += gij * (xi[t] * inv - cy * yj[t]);
                        }
                    }
                }
                vec![(*x, gx), (*y, gy)]
            }
            Op::MaxRows { input, argmax } => {
                let (m, n) = self.shape(*input);
                let mut ga = Tensor::zeros(m, n);
                for (c, &r) in argmax.iter().enumerate() {
                    ga.data[r * n + c] = g.data[c];
                }
                vec![(*input, ga)]
            }
            Op::TopKMeanRows { input, picked } => {
                let (m, n) = self.shape(*input);
                let mut ga = Tensor::zeros(m, n);
                for (c, rows) in picked.iter().enumerate() {
                    let share = g.data[c] / rows.len() as f64;
                    for &r in rows {
                        ga.data[r * n + c] += share;
                    }
                }
                vec![(*input, ga)]
            }
            Op::CrossEntropy { input, label } => {
                let pv = self.value(*input);
                let mut ga = Tensor::zeros(1, pv.cols);
                let p = pv.data[*label];
                if p > PROB_FLOOR {
                    ga.data[*label] = -g.item() / p;
                }
                vec![(*input, ga)]
            }
        };
        Ok(grads)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}
