//! Single-use computation tape.
//!
//! Ops are recorded eagerly: each call computes the forward value and appends
//! a node holding the executed primitive, its input references, and the saved
//! output. [`Tape::backward`] walks the nodes in reverse, accumulates
//! gradients into every `requires_grad` leaf, returns them as [`Gradients`],
//! and clears the tape. A second backward on the same tape is rejected.
//!
//! Independent tapes share nothing mutable, so forward/backward over separate
//! tapes can run on separate threads against `Arc`-shared leaf tensors.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a value on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddScalar(f64),
    Mul,
    ScalarMul(f64),
    Exp,
    Log,
    LogSoftmax,
    GatherRows(Vec<usize>),
    GatherItems(Vec<(usize, usize)>),
    LayerNorm(f64),
    Gelu,
    ConcatCols,
    Slice { axis: usize, range: Range<usize> },
    SumAll,
    MeanAll,
    Softplus,
    ClampMax(f64),
    ClampMin(f64),
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Gradients of a backward pass, keyed by the [`Var`]s of the source tape.
///
/// Only leaves created with `requires_grad = true` carry an entry;
/// intermediate gradients are freed as soon as they have been propagated.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Ordered record of executed primitives; one backward pass per tape.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a shared tensor as a leaf. Leaves are the only vars that can
    /// receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Registers an owned tensor as a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], Arc::new(value), false)
    }

    /// Forward value of a var.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar forward value of a rank-0 var.
    pub fn scalar_value(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let inputs = inputs.into_iter().map(|v| v.0).collect();
        self.push(op, inputs, Arc::new(value), requires_grad)
    }

    // -- primitives ---------------------------------------------------------

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2().map_err(|_| {
            Error::shape("matmul", format!("lhs shape {:?}", self.value(a).shape()))
        })?;
        let (kb, n) = self.value(b).dims2().map_err(|_| {
            Error::shape("matmul", format!("rhs shape {:?}", self.value(b).shape()))
        })?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: [{m},{ka}] x [{kb},{n}]"),
            ));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(Op::MatMul, vec![a, b], out))
    }

    /// `[m,n] -> [n,m]`
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self
            .value(a)
            .dims2()
            .map_err(|_| Error::shape("transpose", format!("shape {:?}", self.value(a).shape())))?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push_op(Op::Transpose, vec![a], out))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(Op::Add, vec![a, b], out))
    }

    /// Adds a compile-time constant to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x + c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push_op(Op::AddScalar(c), vec![a], out)
    }

    /// Hadamard product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(Op::Mul, vec![a, b], out))
    }

    /// Scales every element by a constant (the only broadcasting in the engine).
    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push_op(Op::ScalarMul(c), vec![a], out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push_op(Op::Exp, vec![a], out)
    }

    /// Natural log; defined only on strictly positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(Op::Log, vec![a], out))
    }

    /// Row-wise log-softmax over the last axis, max-subtracted for stability.
    /// Accepts rank-1 (one row) and rank-2 tensors.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = last_axis_dims(self.value(a), "log-softmax")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for (j, v) in row.iter().enumerate() {
                data[r * cols + j] = v - lse;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(Op::LogSoftmax, vec![a], out))
    }

    /// Selects whole rows of a `[n, d]` table: the embedding lookup.
    /// Gradient accumulates into the source rows (repeats add up).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2().map_err(|_| {
            Error::shape(
                "gather-rows",
                format!("table shape {:?}", self.value(table).shape()),
            )
        })?;
        if let Some(bad) = indices.iter().find(|i| **i >= n) {
            return Err(Error::shape(
                "gather-rows",
                format!("row index {bad} out of range for table with {n} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push_op(Op::GatherRows(indices.to_vec()), vec![table], out))
    }

    /// Selects one scalar per (row, col) pair from a rank-2 tensor into a
    /// rank-1 vector. Used to pull target-token log-probabilities out of a
    /// `[positions, vocab]` matrix.
    pub fn gather_items(&mut self, a: Var, items: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2().map_err(|_| {
            Error::shape(
                "gather-items",
                format!("source shape {:?}", self.value(a).shape()),
            )
        })?;
        if let Some(bad) = items.iter().find(|(r, c)| *r >= rows || *c >= cols) {
            return Err(Error::shape(
                "gather-items",
                format!("item {bad:?} out of range for [{rows},{cols}]"),
            ));
        }
        let src = self.value(a).data();
        let data: Vec<f64> = items.iter().map(|&(r, c)| src[r * cols + c]).collect();
        let out = Tensor::vector(data);
        Ok(self.push_op(Op::GatherItems(items.to_vec()), vec![a], out))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` over the last axis, without
    /// learned affine parameters. Variance uses the biased 1/n estimator.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = last_axis_dims(self.value(a), "layer-norm")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                data[r * cols + j] = (v - mean) * inv;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(Op::LayerNorm(eps), vec![a], out))
    }

    /// Tanh-approximation GELU, smooth everywhere.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push_op(Op::Gelu, vec![a], out)
    }

    /// Concatenates rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no tensors to concatenate"));
        }
        let (rows, _) = self.value(parts[0]).dims2().map_err(|_| {
            Error::shape(
                "concat",
                format!("part shape {:?}", self.value(parts[0]).shape()),
            )
        })?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self
                .value(*p)
                .dims2()
                .map_err(|_| Error::shape("concat", "rank-2 parts required"))?;
            if r != rows {
                return Err(Error::shape(
                    "concat",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_op(Op::ConcatCols, parts.to_vec(), out))
    }

    /// Contiguous row range of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        self.slice(a, 0, range)
    }

    /// Contiguous column range of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        self.slice(a, 1, range)
    }

    fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let (rows, cols) = self
            .value(a)
            .dims2()
            .map_err(|_| Error::shape("slice", format!("shape {:?}", self.value(a).shape())))?;
        let bound = if axis == 0 { rows } else { cols };
        if range.start >= range.end || range.end > bound {
            return Err(Error::shape(
                "slice",
                format!("range {range:?} invalid for axis {axis} of [{rows},{cols}]"),
            ));
        }
        let src = self.value(a).data();
        let out = if axis == 0 {
            let data = src[range.start * cols..range.end * cols].to_vec();
            Tensor::new(vec![range.end - range.start, cols], data)?
        } else {
            let w = range.end - range.start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&src[r * cols + range.start..r * cols + range.end]);
            }
            Tensor::new(vec![rows, w], data)?
        };
        Ok(self.push_op(Op::Slice { axis, range }, vec![a], out))
    }

    /// Sum of all elements, yielding a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    /// Mean of all elements, yielding a rank-0 scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_op(Op::MeanAll, vec![a], Tensor::scalar(s))
    }

    /// `ln(1 + exp(x))` computed stably; derivative is the logistic sigmoid.
    pub fn softplus(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| softplus(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push_op(Op::Softplus, vec![a], out)
    }

    /// `min(x, c)`. Where the constant branch is active (`x > c`) the gradient
    /// is exactly zero — this is what makes reward clipping kill gradients.
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.min(c)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push_op(Op::ClampMax(c), vec![a], out)
    }

    /// `max(x, c)`, zero gradient where `x < c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(c)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push_op(Op::ClampMin(c), vec![a], out)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar root. Fills gradients for every
    /// `requires_grad` leaf, consumes the tape, and clears the node record.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract(
                "backward called twice on the same tape".to_string(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gout); // keep leaf gradients for the caller
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads.into_iter()) {
            match (matches!(node.op, Op::Leaf) && node.requires_grad, g) {
                (true, Some(g)) => out.push(Some(Tensor::new(node.value.shape().to_vec(), g)?)),
                _ => out.push(None),
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, add: impl FnOnce(&mut [f64])) {
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let in_idx = |k: usize| node.inputs[k];
        let in_val = |k: usize| -> &Tensor { &self.nodes[node.inputs[k]].value };
        let in_rg = |k: usize| self.nodes[node.inputs[k]].requires_grad;

        match &node.op {
            Op::Leaf => unreachable!("leaf handled in backward loop"),
            Op::MatMul => {
                let (m, k) = in_val(0).dims2().expect("checked at forward");
                let (_, n) = in_val(1).dims2().expect("checked at forward");
                if in_rg(0) {
                    let da = matmul_nt(gout, in_val(1).data(), m, n, k);
                    Self::accumulate(grads, in_idx(0), m * k, |g| {
                        for (gi, di) in g.iter_mut().zip(&da) {
                            *gi += di;
                        }
                    });
                }
                if in_rg(1) {
                    let db = matmul_tn(in_val(0).data(), gout, k, m, n);
                    Self::accumulate(grads, in_idx(1), k * n, |g| {
                        for (gi, di) in g.iter_mut().zip(&db) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::Transpose => {
                let (n, m) = node.value.dims2().expect("rank-2");
                if in_rg(0) {
                    Self::accumulate(grads, in_idx(0), m * n, |g| {
                        for r in 0..n {
                            for c in 0..m {
                                g[c * n + r] += gout[r * m + c];
                            }
                        }
                    });
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if in_rg(k) {
                        Self::accumulate(grads, in_idx(k), gout.len(), |g| {
                            for (gi, go) in g.iter_mut().zip(gout) {
                                *gi += go;
                            }
                        });
                    }
                }
            }
            Op::AddScalar(_) => {
                if in_rg(0) {
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::Mul => {
                for k in 0..2 {
                    if in_rg(k) {
                        let other = in_val(1 - k).data();
                        Self::accumulate(grads, in_idx(k), gout.len(), |g| {
                            for ((gi, go), ov) in g.iter_mut().zip(gout).zip(other) {
                                *gi += go * ov;
                            }
                        });
                    }
                }
            }
            Op::ScalarMul(c) => {
                if in_rg(0) {
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go * c;
                        }
                    });
                }
            }
            Op::Exp => {
                if in_rg(0) {
                    let y = node.value.data();
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for ((gi, go), yv) in g.iter_mut().zip(gout).zip(y) {
                            *gi += go * yv;
                        }
                    });
                }
            }
            Op::Log => {
                if in_rg(0) {
                    let x = in_val(0).data();
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for ((gi, go), xv) in g.iter_mut().zip(gout).zip(x) {
                            *gi += go / xv;
                        }
                    });
                }
            }
            Op::LogSoftmax => {
                if in_rg(0) {
                    let (rows, cols) = last_axis_dims(&node.value, "log-softmax").expect("checked");
                    let y = node.value.data();
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for r in 0..rows {
                            let go = &gout[r * cols..(r + 1) * cols];
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gsum: f64 = go.iter().sum();
                            let gr = &mut g[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                gr[j] += go[j] - yr[j].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::GatherRows(indices) => {
                if in_rg(0) {
                    let (n, d) = in_val(0).dims2().expect("rank-2");
                    Self::accumulate(grads, in_idx(0), n * d, |g| {
                        for (r, &i) in indices.iter().enumerate() {
                            let src = &gout[r * d..(r + 1) * d];
                            let dst = &mut g[i * d..(i + 1) * d];
                            for (di, si) in dst.iter_mut().zip(src) {
                                *di += si;
                            }
                        }
                    });
                }
            }
            Op::GatherItems(items) => {
                if in_rg(0) {
                    let (_, cols) = in_val(0).dims2().expect("rank-2");
                    let len = in_val(0).len();
                    Self::accumulate(grads, in_idx(0), len, |g| {
                        for (k, &(r, c)) in items.iter().enumerate() {
                            g[r * cols + c] += gout[k];
                        }
                    });
                }
            }
            Op::LayerNorm(eps) => {
                if in_rg(0) {
                    let (rows, cols) = last_axis_dims(&node.value, "layer-norm").expect("checked");
                    let x = in_val(0).data();
                    let y = node.value.data();
                    let n = cols as f64;
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for r in 0..rows {
                            let xr = &x[r * cols..(r + 1) * cols];
                            let yr = &y[r * cols..(r + 1) * cols];
                            let go = &gout[r * cols..(r + 1) * cols];
                            let mean = xr.iter().sum::<f64>() / n;
                            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            let inv = 1.0 / (var + eps).sqrt();
                            let g_mean = go.iter().sum::<f64>() / n;
                            let gy_mean =
                                go.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                            let gr = &mut g[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                gr[j] += inv * (go[j] - g_mean - yr[j] * gy_mean);
                            }
                        }
                    });
                }
            }
            Op::Gelu => {
                if in_rg(0) {
                    let x = in_val(0).data();
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for ((gi, go), &xv) in g.iter_mut().zip(gout).zip(x) {
                            *gi += go * gelu_grad(xv);
                        }
                    });
                }
            }
            Op::ConcatCols => {
                let (rows, total) = node.value.dims2().expect("rank-2");
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let (_, w) = in_val(k).dims2().expect("rank-2");
                    if in_rg(k) {
                        Self::accumulate(grads, in_idx(k), rows * w, |g| {
                            for r in 0..rows {
                                let src = &gout[r * total + offset..r * total + offset + w];
                                let dst = &mut g[r * w..(r + 1) * w];
                                for (di, si) in dst.iter_mut().zip(src) {
                                    *di += si;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Slice { axis, range } => {
                if in_rg(0) {
                    let (rows, cols) = in_val(0).dims2().expect("rank-2");
                    let range = range.clone();
                    let axis = *axis;
                    Self::accumulate(grads, in_idx(0), rows * cols, |g| {
                        if axis == 0 {
                            let dst = &mut g[range.start * cols..range.end * cols];
                            for (di, si) in dst.iter_mut().zip(gout) {
                                *di += si;
                            }
                        } else {
                            let w = range.end - range.start;
                            for r in 0..rows {
                                let src = &gout[r * w..(r + 1) * w];
                                let dst = &mut g
                                    [r * cols + range.start..r * cols + range.end];
                                for (di, si) in dst.iter_mut().zip(src) {
                                    *di += si;
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll => {
                if in_rg(0) {
                    let len = in_val(0).len();
                    let go = gout[0];
                    Self::accumulate(grads, in_idx(0), len, |g| {
                        for gi in g.iter_mut() {
                            *gi += go;
                        }
                    });
                }
            }
            Op::MeanAll => {
                if in_rg(0) {
                    let len = in_val(0).len();
                    let go = gout[0] / len as f64;
                    Self::accumulate(grads, in_idx(0), len, |g| {
                        for gi in g.iter_mut() {
                            *gi += go;
                        }
                    });
                }
            }
            Op::Softplus => {
                if in_rg(0) {
                    let x = in_val(0).data();
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for ((gi, go), &xv) in g.iter_mut().zip(gout).zip(x) {
                            *gi += go * sigmoid(xv);
                        }
                    });
                }
            }
            Op::ClampMax(c) => {
                if in_rg(0) {
                    let x = in_val(0).data();
                    let c = *c;
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for ((gi, go), &xv) in g.iter_mut().zip(gout).zip(x) {
                            if xv <= c {
                                *gi += go;
                            }
                        }
                    });
                }
            }
            Op::ClampMin(c) => {
                if in_rg(0) {
                    let x = in_val(0).data();
                    let c = *c;
                    Self::accumulate(grads, in_idx(0), gout.len(), |g| {
                        for ((gi, go), &xv) in g.iter_mut().zip(gout).zip(x) {
                            if xv >= c {
                                *gi += go;
                            }
                        }
                    });
                }
            }
        }
    }
}

fn last_axis_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(
            op,
            format!("expected rank-1 or rank-2 tensor, got {:?}", other),
        )),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
