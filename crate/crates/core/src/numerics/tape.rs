//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a node
//! can only reference nodes created before it. Gradients accumulate additively
//! when a value fans out to several consumers.
//!
//! Nodes created with [`Tape::constant`] (and everything computed purely from
//! constants) carry no gradient.

use super::tensor::{gemm, Tensor};
use crate::error::{IkError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    BatchedMatVec {
        w: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    RowScalar {
        x: Var,
        local_grad: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm, for updating the
/// running averages held by the layer.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x[r×c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(IkError::shape("add_bias", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        let rg = self.req(x) || self.req(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(IkError::shape("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.req(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.req(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Train-mode batch norm over the rows of `x[batch×d]`, with learnable
    /// `gamma[d]` and `beta[d]`. Uses the biased batch variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (b, d) = (xv.rows(), xv.cols());
        if b < 2 {
            return Err(IkError::BatchTooSmall(b));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(IkError::shape("batch_norm", xv.shape(), gv.shape()));
        }
        let mut mean = vec![0.0; d];
        for r in 0..b {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; d];
        for r in 0..b {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut normalized = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            for j in 0..d {
                let n = (xv.data()[r * d + j] - mean[j]) * inv_std[j];
                normalized[r * d + j] = n;
                out[r * d + j] = gv.data()[j] * n + bv.data()[j];
            }
        }
        let out = Tensor::matrix(b, d, out)?;
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(IkError::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, out)?;
        let rg = self.req(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Per-row matrix-vector product: row `b` of `w` holds a row-major
    /// `rows×cols` matrix that multiplies row `b` of `x[batch×cols]`.
    pub fn batched_matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        let b = xv.rows();
        if wv.rows() != b || wv.cols() != rows * cols || xv.cols() != cols {
            return Err(IkError::shape("batched_matvec", wv.shape(), xv.shape()));
        }
        let mut out = vec![0.0; b * rows];
        for s in 0..b {
            let wm = wv.row(s);
            let xs = xv.row(s);
            let o = &mut out[s * rows..(s + 1) * rows];
            for (i, oi) in o.iter_mut().enumerate() {
                *oi = wm[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(xs)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let out = Tensor::matrix(b, rows, out)?;
        let rg = self.req(w) || self.req(x);
        Ok(self.push(out, Op::BatchedMatVec { w, x, rows, cols }, rg))
    }

    /// Applies a scalar function to each row of `x`. `f` returns the value and
    /// its gradient with respect to the row; output has shape `[rows]`.
    pub fn row_scalar<F>(&mut self, x: Var, mut f: F) -> Result<Var>
    where
        F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
    {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut values = Vec::with_capacity(r);
        let mut local_grad = Vec::with_capacity(r * c);
        for i in 0..r {
            let (v, g) = f(i, xv.row(i));
            if g.len() != c {
                return Err(IkError::shape("row_scalar", &[c], &[g.len()]));
            }
            values.push(v);
            local_grad.extend(g);
        }
        let rg = self.req(x);
        Ok(self.push(Tensor::vector(values), Op::RowScalar { x, local_grad }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.req(a);
        self.push(Tensor::vector(vec![s]), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        let rg = self.req(a);
        self.push(Tensor::vector(vec![s]), Op::Mean(a), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(IkError::shape("mse", pv.shape(), target.shape()));
        }
        let n = pv.len() as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.req(pred);
        Ok(self.push(
            Tensor::vector(vec![s / n]),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        grads[output.0] = Some(Tensor::filled(&out_shape, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.req(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates `op(a)·op(b)` straight into the gradient slot of `v`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_gemm(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        trans_a: bool,
        trans_b: bool,
        dims: (usize, usize, usize),
        a: &[f64],
        b: &[f64],
    ) {
        if !self.req(v) {
            return;
        }
        let (m, k, n) = dims;
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        gemm(trans_a, trans_b, m, k, n, a, b, slot.data_mut(), true);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // grad_a = g · bᵀ ; grad_b = aᵀ · g
                self.accumulate_gemm(grads, *a, false, true, (m, n, k), g.data(), bv.data());
                self.accumulate_gemm(grads, *b, true, false, (k, m, n), av.data(), g.data());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.req(*bias) {
                    let bv = self.value(*bias);
                    let c = bv.len();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % c] += v;
                    }
                    let gb = Tensor::new(bv.shape().to_vec(), gb).expect("bias shape");
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut out = g.clone();
                for (o, &x) in out.data_mut().iter_mut().zip(av.data()) {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (b, d) = (g.rows(), g.cols());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut sum_dn = vec![0.0; d];
                let mut sum_dn_n = vec![0.0; d];
                for r in 0..b {
                    for j in 0..d {
                        let gy = g.data()[r * d + j];
                        let n = normalized[r * d + j];
                        dgamma[j] += gy * n;
                        dbeta[j] += gy;
                        let dn = gy * gv.data()[j];
                        sum_dn[j] += dn;
                        sum_dn_n[j] += dn * n;
                    }
                }
                if self.req(*x) {
                    let bf = b as f64;
                    let mut dx = vec![0.0; b * d];
                    for r in 0..b {
                        for j in 0..d {
                            let dn = g.data()[r * d + j] * gv.data()[j];
                            let n = normalized[r * d + j];
                            dx[r * d + j] =
                                inv_std[j] / bf * (bf * dn - sum_dn[j] - n * sum_dn_n[j]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(b, d, dx).expect("bn shape"));
                }
                let gshape = gv.shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape.clone(), dgamma).unwrap());
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *beta, Tensor::new(bshape, dbeta).unwrap());
            }
            Op::SliceCols { x, start } => {
                if self.req(*x) {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let len = g.cols();
                    let shape = xv.shape().to_vec();
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    let dst = slot.data_mut();
                    for i in 0..r {
                        let row = &mut dst[i * c + start..i * c + start + len];
                        for (d, s) in row.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::BatchedMatVec { w, x, rows, cols } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let b = xv.rows();
                let (rows, cols) = (*rows, *cols);
                if self.req(*w) {
                    let mut dw = vec![0.0; b * rows * cols];
                    for s in 0..b {
                        let gs = g.row(s);
                        let xs = xv.row(s);
                        let dws = &mut dw[s * rows * cols..(s + 1) * rows * cols];
                        for i in 0..rows {
                            let gi = gs[i];
                            for (d, xj) in dws[i * cols..(i + 1) * cols].iter_mut().zip(xs) {
                                *d = gi * xj;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::matrix(b, rows * cols, dw).unwrap());
                }
                if self.req(*x) {
                    let mut dx = vec![0.0; b * cols];
                    for s in 0..b {
                        let gs = g.row(s);
                        let wm = wv.row(s);
                        let dxs = &mut dx[s * cols..(s + 1) * cols];
                        for i in 0..rows {
                            let gi = gs[i];
                            for (d, wij) in dxs.iter_mut().zip(&wm[i * cols..(i + 1) * cols]) {
                                *d += gi * wij;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(b, cols, dx).unwrap());
                }
            }
            Op::RowScalar { x, local_grad } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = local_grad.clone();
                for (i, gi) in g.data().iter().enumerate() {
                    dx[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= gi);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.data()[0] / av.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(av.shape(), v));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let scale = 2.0 * g.data()[0] / pv.len() as f64;
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d).unwrap());
            }
        }
    }
}
