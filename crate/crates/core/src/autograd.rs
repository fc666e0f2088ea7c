//! A small reverse-mode tape over 2-D `f64` tensors.
//!
//! Every forward op appends a node holding its value; `Graph::backward` walks
//! the tape in reverse. Composite ops used by the encoders (layer norm,
//! multi-head attention, InfoNCE, cross-entropy) carry hand-derived backward
//! passes instead of being decomposed into primitives.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One InfoNCE anchor: a score-matrix row, its positive columns (each a
/// separate term), and the negative columns shared by those terms.
#[derive(Clone, Debug)]
pub struct NceGroup {
    pub row: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Weight applied to each positive's term.
    pub weight: f64,
}

/// Shape bookkeeping for the fused attention op.
#[derive(Clone, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f64> },
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    L2Normalize { x: Var, norms: Vec<f64> },
    /// Scalar output; the gradient w.r.t. the input is cached at forward time.
    CachedGradScalar { x: Var, grad: Tensor },
    Sum(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let mut v = self.value(x).clone();
        let b = self.value(row);
        assert_eq!((1, v.cols()), b.shape(), "add_row expects a 1 x cols bias");
        for r in 0..v.rows() {
            for (o, bb) in v.row_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(v, Op::AddRow(x, row), rg)
    }

    /// `x @ w + b` with `b` optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch*q_len, d]`, `k` and `v` are `[batch*k_len, d]`. Keys with
    /// `key_mask[b*k_len + j] == false` receive zero probability. Each query
    /// needs at least one unmasked key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, key_mask: Option<&[bool]>) -> Var {
        let AttnShape { batch, q_len, k_len, heads } = shape;
        let d = self.value(q).cols();
        assert_eq!(self.value(q).rows(), batch * q_len, "attention query rows");
        assert_eq!(self.value(k).rows(), batch * k_len, "attention key rows");
        assert_eq!(self.value(v).rows(), batch * k_len, "attention value rows");
        assert_eq!(d % heads, 0, "d_model must be divisible by heads");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), batch * k_len, "attention key mask length");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = Tensor::zeros(batch * q_len, d);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let blk = q_len * k_len;
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * blk..(b * heads + h + 1) * blk];
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                gemm(
                    q_len, dh, k_len, scale,
                    &qd[qo..], d as isize, 1,
                    &kd[ko..], 1, d as isize,
                    0.0, p, k_len as isize, 1,
                );
                for i in 0..q_len {
                    let row = &mut p[i * k_len..(i + 1) * k_len];
                    if let Some(m) = key_mask {
                        for (j, x) in row.iter_mut().enumerate() {
                            if !m[b * k_len + j] {
                                *x = f64::NEG_INFINITY;
                            }
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(
                    q_len, k_len, dh, 1.0,
                    p, k_len as isize, 1,
                    &vd[ko..], d as isize, 1,
                    0.0, &mut out.data_mut()[qo..], d as isize, 1,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, shape, probs }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(x).gather_rows(&idx);
        let rg = self.rg(x);
        self.push(v, Op::GatherRows(x, idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let v = {
            let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&ts)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row-wise `x / (||x|| + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (loss, grad) = cross_entropy_value(lv, targets);
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::CachedGradScalar { x: logits, grad }, rg)
    }

    /// Weighted sum of InfoNCE terms over a score matrix (raw similarities,
    /// divided by `tau` inside). See [`infonce_groups_value`].
    pub fn infonce(&mut self, scores: Var, groups: &[NceGroup], tau: f64, include_positive: bool) -> Var {
        let (loss, grad) = infonce_groups_value(self.value(scores), groups, tau, include_positive);
        let rg = self.rg(scores);
        self.push(Tensor::scalar(loss), Op::CachedGradScalar { x: scores, grad }, rg)
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.value(p).item()).sum();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::scalar(total), Op::Sum(parts.to_vec()), rg)
    }

    /// Reverse pass from a scalar node. Returns a gradient slot per node;
    /// slots are `None` for nodes that do not require grad or were unreached.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = gout.matmul_t(vb);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(
                        va.cols(), va.rows(), gout.cols(), 1.0,
                        va.data(), 1, va.cols() as isize,
                        gout.data(), gout.cols() as isize, 1,
                        0.0, gb.data_mut(), vb.cols() as isize, 1,
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    accumulate(grads, *a, gout.matmul(vb));
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(
                        gout.cols(), gout.rows(), va.cols(), 1.0,
                        gout.data(), 1, gout.cols() as isize,
                        va.data(), va.cols() as isize, 1,
                        0.0, gb.data_mut(), vb.cols() as isize, 1,
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gout.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(va.rows(), va.cols(), d));
                }
                if self.rg(*b) {
                    let d = gout.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Tensor::from_vec(vb.rows(), vb.cols(), d));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, gout.map(|g| g * s)),
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    accumulate(grads, *x, gout.clone());
                }
                if self.rg(*row) {
                    let mut gb = Tensor::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (o, g) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(grads, *row, gb);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = xhat.shape();
                let g = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let (go, xh) = (gout.row(r), xhat.row(r));
                        for c in 0..cols {
                            gg.data_mut()[c] += go[c] * xh[c];
                            gb.data_mut()[c] += go[c];
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(grads, *gamma, gg);
                    }
                    if self.rg(*beta) {
                        accumulate(grads, *beta, gb);
                    }
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let (go, xh) = (gout.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = go[c] * g[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let o = gx.row_mut(r);
                        for c in 0..cols {
                            o[c] = rstd[r] * (go[c] * g[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = gout
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.rows(), xv.cols(), d));
            }
            Op::Attention { q, k, v, shape, probs } => self.attention_backward(*q, *k, *v, shape, probs, gout, grads),
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, g) in gx.row_mut(i).iter_mut().zip(gout.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let cols = gout.cols();
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        let d = gout.data()[start * cols..(start + rows) * cols].to_vec();
                        accumulate(grads, *p, Tensor::from_vec(rows, cols, d));
                    }
                    start += rows;
                }
            }
            Op::L2Normalize { x, norms } => {
                // norms here hold (||x|| + eps); y = x / n, dy/dx = (I - y y^T * ||x||/n) / n
                let xv = self.value(*x);
                let y = &node.value;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = norms[r];
                    let xr = xv.row(r);
                    let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let go = gout.row(r);
                    let yr = y.row(r);
                    let dot: f64 = go.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let o = gx.row_mut(r);
                    if raw == 0.0 {
                        for c in 0..o.len() {
                            o[c] = go[c] / n;
                        }
                        continue;
                    }
                    // y = x / (|x| + eps): dy_c/dx_j = delta_cj / n - x_c x_j / (n^2 |x|)
                    for c in 0..o.len() {
                        o[c] = go[c] / n - dot * xr[c] / (n * raw);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::CachedGradScalar { x, grad } => {
                let s = gout.item();
                accumulate(grads, *x, grad.map(|g| g * s));
            }
            Op::Sum(parts) => {
                let s = gout.item();
                for p in parts {
                    if self.rg(*p) {
                        accumulate(grads, *p, Tensor::scalar(s));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: &AttnShape,
        probs: &[f64],
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let AttnShape { batch, q_len, k_len, heads } = *shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows(), d);
        let mut gk = Tensor::zeros(kv.rows(), d);
        let mut gv = Tensor::zeros(vv.rows(), d);
        let blk = q_len * k_len;
        let mut dp = vec![0.0; blk];
        let go = gout.data();
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * blk..(b * heads + h + 1) * blk];
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                // dV = P^T dO
                gemm(
                    k_len, q_len, dh, 1.0,
                    p, 1, k_len as isize,
                    &go[qo..], d as isize, 1,
                    0.0, &mut gv.data_mut()[ko..], d as isize, 1,
                );
                // dP = dO V^T
                gemm(
                    q_len, dh, k_len, 1.0,
                    &go[qo..], d as isize, 1,
                    &vv.data()[ko..], 1, d as isize,
                    0.0, &mut dp, k_len as isize, 1,
                );
                // dS = P * (dP - rowsum(dP * P)), scaled
                for i in 0..q_len {
                    let pr = &p[i * k_len..(i + 1) * k_len];
                    let dr = &mut dp[i * k_len..(i + 1) * k_len];
                    let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..k_len {
                        dr[j] = pr[j] * (dr[j] - s) * scale;
                    }
                }
                // dQ = dS K
                gemm(
                    q_len, k_len, dh, 1.0,
                    &dp, k_len as isize, 1,
                    &kv.data()[ko..], d as isize, 1,
                    0.0, &mut gq.data_mut()[qo..], d as isize, 1,
                );
                // dK = dS^T Q
                gemm(
                    k_len, q_len, dh, 1.0,
                    &dp, 1, k_len as isize,
                    &qv.data()[qo..], d as isize, 1,
                    0.0, &mut gk.data_mut()[ko..], d as isize, 1,
                );
            }
        }
        if self.rg(q) {
            accumulate(grads, q, gq);
        }
        if self.rg(k) {
            accumulate(grads, k, gk);
        }
        if self.rg(v) {
            accumulate(grads, v, gv);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_value(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let (rows, cols) = logits.shape();
    assert_eq!(rows, targets.len(), "one target per logit row");
    let mut grad = Tensor::zeros(rows, cols);
    if rows == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for r in 0..rows {
        let g = grad.row_mut(r);
        g.copy_from_slice(logits.row(r));
        let lse = log_sum_exp(g.iter().copied());
        loss += lse - g[targets[r]];
        for x in g.iter_mut() {
            *x = (*x - lse).exp() / rows as f64;
        }
        g[targets[r]] -= 1.0 / rows as f64;
    }
    (loss / rows as f64, grad)
}

/// `sum_g w_g * sum_{p in g.positives} [lse(s_p, s_n...) - s_p]` with
/// `s = scores / tau`, plus its gradient w.r.t. `scores`.
///
/// With `include_positive = false` the positive is dropped from the
/// log-sum-exp (the literal form that sums only over negatives).
pub fn infonce_groups_value(scores: &Tensor, groups: &[NceGroup], tau: f64, include_positive: bool) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(scores.rows(), scores.cols());
    let mut loss = 0.0;
    let mut neg_buf = Vec::new();
    for grp in groups {
        let row = scores.row(grp.row);
        neg_buf.clear();
        neg_buf.extend(grp.negatives.iter().map(|&c| row[c] / tau));
        let neg_max = neg_buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let neg_sum = if neg_max == f64::NEG_INFINITY {
            0.0
        } else {
            neg_buf.iter().map(|s| (s - neg_max).exp()).sum::<f64>()
        };
        for &p in &grp.positives {
            let sp = row[p] / tau;
            let (lse, pos_in) = if include_positive {
                let m = sp.max(neg_max);
                let total = (sp - m).exp() + if neg_sum > 0.0 { neg_sum * (neg_max - m).exp() } else { 0.0 };
                (m + total.ln(), true)
            } else {
                (neg_max + neg_sum.ln(), false)
            };
            loss += grp.weight * (lse - sp);
            let g = grad.row_mut(grp.row);
            for (&c, &sn) in grp.negatives.iter().zip(&neg_buf) {
                g[c] += grp.weight * (sn - lse).exp() / tau;
            }
            let pos_prob = if pos_in { (sp - lse).exp() } else { 0.0 };
            g[p] += grp.weight * (pos_prob - 1.0) / tau;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` at the leaf values in `inputs`.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            for e in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == i {
                                t.data_mut()[e] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let o = f(&mut g, &vars);
                    g.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} elem {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rnd(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(r, c, 1.0, &mut rng)
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let (r, c) = g.value(x).shape();
        let w = g.constant(rnd(r, c, seed));
        let m = g.mul(x, w);
        let ones = g.constant(Tensor::filled(c, 1, 1.0));
        let s = g.matmul(m, ones);
        let ones_r = g.constant(Tensor::filled(1, r, 1.0));
        g.matmul(ones_r, s)
    }

    #[test]
    fn matmul_and_bias_gradients() {
        check(vec![rnd(3, 4, 1), rnd(4, 2, 2), rnd(1, 2, 3)], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            weighted_sum(g, y, 9)
        });
        check(vec![rnd(3, 4, 4), rnd(5, 4, 5)], |g, v| {
            let y = g.matmul_t(v[0], v[1]);
            weighted_sum(g, y, 10)
        });
    }

    #[test]
    fn layer_norm_gelu_gradients() {
        check(vec![rnd(3, 5, 6), rnd(1, 5, 7), rnd(1, 5, 8)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let y = g.gelu(y);
            weighted_sum(g, y, 11)
        });
    }

    #[test]
    fn attention_gradients_with_mask() {
        let shape = AttnShape { batch: 2, q_len: 3, k_len: 4, heads: 2 };
        let mask = vec![true, true, false, true, true, false, false, true];
        check(vec![rnd(6, 4, 12), rnd(8, 4, 13), rnd(8, 4, 14)], move |g, v| {
            let y = g.attention(v[0], v[1], v[2], shape.clone(), Some(&mask));
            weighted_sum(g, y, 15)
        });
    }

    #[test]
    fn gather_concat_normalize_gradients() {
        check(vec![rnd(3, 4, 16), rnd(2, 4, 17)], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]);
            let s = g.gather_rows(c, Rc::new(vec![4, 0, 0, 2]));
            let n = g.l2_normalize(s, 1e-12);
            weighted_sum(g, n, 18)
        });
    }

    #[test]
    fn cross_entropy_and_infonce_gradients() {
        check(vec![rnd(4, 5, 19)], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]));
        let groups = vec![
            NceGroup { row: 0, positives: vec![0, 1], negatives: vec![2, 3, 4], weight: 0.5 },
            NceGroup { row: 2, positives: vec![4], negatives: vec![0, 1], weight: 0.25 },
        ];
        for include in [true, false] {
            let gr = groups.clone();
            check(vec![rnd(3, 5, 20)], move |g, v| g.infonce(v[0], &gr, 0.3, include));
        }
    }

    #[test]
    fn unreached_branches_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(4.0));
        let ab = g.mul(a, c);
        let _unused = g.mul(b, c);
        let grads = g.backward(ab);
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
        assert!(grads.get(b).is_none());
        assert!(grads.get(c).is_none());
    }
}
