//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in topological order, so the backward sweep is a single reverse
//! scan. Attention, batch normalization and masked log-softmax are fused
//! kernels with hand-written adjoints; everything else is elementwise or a
//! matrix product.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{gemm_into, matmul, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major `rows x cols` boolean mask; `true` marks an excluded entry.
pub type Mask = Arc<Vec<bool>>;

enum Op<T> {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    GatherRows { a: Var, index: Arc<Vec<usize>> },
    ScatterAddRows { a: Var, index: Arc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor<T>> },
    MixedScoreAttention { q: Var, k: Var, v: Var, mix: MixVars, heads: usize, dist: Arc<Tensor<T>>, scores: Vec<Tensor<T>>, probs: Vec<Tensor<T>> },
    MaskedLogSoftmax { a: Var, mask: Option<Mask> },
    PickCols { a: Var, index: Arc<Vec<usize>> },
}

/// Parameters of the per-head 2-input scoring MLP.
#[derive(Clone, Copy, Debug)]
pub struct MixVars {
    /// `heads x 2m`: first `m` columns weight the dot-product score, last `m` the edge weight.
    pub w1: Var,
    /// `heads x m`
    pub b1: Var,
    /// `heads x m`
    pub w2: Var,
    /// `heads x 1`
    pub b2: Var,
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mask_at(mask: &Option<Mask>, idx: usize) -> bool {
    mask.as_ref().is_some_and(|m| m[idx])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to parameter slot `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Arc<Tensor<T>>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_arc(Arc::clone(value), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, ta, b, tb })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.rows, va.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols), vr.shape(), "broadcast row shape mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(index.len(), va.cols);
        for (r, &src) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(va.row(src));
        }
        self.push(out, Op::GatherRows { a, index })
    }

    /// `out[index[r]] += a[r]`, producing `out_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<Vec<usize>>, out_rows: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, index.len(), "scatter index length mismatch");
        let mut out = Tensor::zeros(out_rows, va.cols);
        for (r, &dst) in index.iter().enumerate() {
            for (o, &x) in out.row_mut(dst).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::ScatterAddRows { a, index })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + vp.cols].copy_from_slice(vp.row(r));
            }
            offset += vp.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat column mismatch");
            data.extend_from_slice(&vp.data);
            rows += vp.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Normalizes every column over the rows of `x` (biased variance), then
    /// applies the affine `gamma`, `beta` rows.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let nr = T::of(rows as f64);
        let mut mean = vec![T::zero(); cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(vx.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nr);
        let mut var = vec![T::zero(); cols];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(vx.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / nr + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(rows, cols);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let h = (vx.at(r, c) - mean[c]) * inv_std[c];
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data[c] + vb.data[c]);
            }
        }
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention. `q` is `t x h`, `k`/`v` are
    /// `n x h`; the optional mask is `t x n`. Fully masked rows attend to nothing.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Mask>) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, h) = vq.shape();
        let n = vk.rows;
        assert_eq!(h % heads, 0);
        let d = h / heads;
        let inv = T::one() / T::of(d as f64).sqrt();
        let mut out = Tensor::zeros(t, h);
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let off = head * d;
            let mut s = Tensor::zeros(t, n);
            block_gemm(vq, off, d, false, vk, off, d, true, &mut s, 0, n, false);
            softmax_rows(&mut s, inv, &mask);
            block_gemm_into(&s, vv, off, d, &mut out, off);
            probs.push(s);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Multi-head attention whose logits come from a per-head MLP over
    /// `(q_i . k_j / sqrt(d), dist_ij)`.
    pub fn mixed_score_attention(&mut self, q: Var, k: Var, v: Var, dist: Arc<Tensor<T>>, mix: MixVars, heads: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, h) = vq.shape();
        assert_eq!(dist.shape(), (n, vk.rows));
        let d = h / heads;
        let inv = T::one() / T::of(d as f64).sqrt();
        let (w1, b1, w2, b2) = (self.value(mix.w1), self.value(mix.b1), self.value(mix.w2), self.value(mix.b2));
        let m = b1.cols;
        let mut out = Tensor::zeros(n, h);
        let mut scores = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let off = head * d;
            let mut s = Tensor::zeros(n, vk.rows);
            block_gemm(vq, off, d, false, vk, off, d, true, &mut s, 0, vk.rows, false);
            s.data.iter_mut().for_each(|x| *x *= inv);
            let wrow = w1.row(head);
            let (ws, wd) = wrow.split_at(m);
            let mut mixed = Tensor::zeros(n, vk.rows);
            for (idx, out_ij) in mixed.data.iter_mut().enumerate() {
                let (sv, dv) = (s.data[idx], dist.data[idx]);
                let mut acc = b2.data[head];
                for j in 0..m {
                    let pre = ws[j] * sv + wd[j] * dv + b1.at(head, j);
                    if pre > T::zero() {
                        acc += w2.at(head, j) * pre;
                    }
                }
                *out_ij = acc;
            }
            softmax_rows(&mut mixed, T::one(), &None);
            block_gemm_into(&mixed, vv, off, d, &mut out, off);
            scores.push(s);
            probs.push(mixed);
        }
        self.push(out, Op::MixedScoreAttention { q, k, v, mix, heads, dist, scores, probs })
    }

    /// Row-wise log-softmax over unmasked entries; masked entries are `-inf`.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Option<Mask>) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..va.rows {
            let base = r * va.cols;
            let mut mx = T::neg_infinity();
            for c in 0..va.cols {
                if !mask_at(&mask, base + c) {
                    mx = mx.max(va.data[base + c]);
                }
            }
            let mut z = T::zero();
            for c in 0..va.cols {
                if !mask_at(&mask, base + c) {
                    z += (va.data[base + c] - mx).exp();
                }
            }
            let lse = mx + z.ln();
            for c in 0..va.cols {
                out.data[base + c] =
                    if mask_at(&mask, base + c) { T::neg_infinity() } else { va.data[base + c] - lse };
            }
        }
        self.push(out, Op::MaskedLogSoftmax { a, mask })
    }

    /// `out[r, 0] = a[r, index[r]]`.
    pub fn pick_cols(&mut self, a: Var, index: Arc<Vec<usize>>) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, index.len());
        let data = index.iter().enumerate().map(|(r, &c)| va.at(r, c)).collect();
        let out = Tensor::from_vec(va.rows, 1, data);
        self.push(out, Op::PickCols { a, index })
    }

    /// Per-head attention weights recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Tensor<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } | Op::MixedScoreAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Which side of zero every ReLU pre-activation on the tape fell on,
    /// including the hidden units inside mixed-score attention. Two forward
    /// passes with equal patterns lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                &Op::Relu(a) => out.extend(self.value(a).data.iter().map(|&x| x > T::zero())),
                Op::MixedScoreAttention { mix, heads, dist, scores, .. } => {
                    let (w1, b1) = (self.value(mix.w1), self.value(mix.b1));
                    let m = b1.cols;
                    for (head, s) in scores.iter().enumerate().take(*heads) {
                        let (ws, wd) = w1.row(head).split_at(m);
                        for (idx, &sv) in s.data.iter().enumerate() {
                            for j in 0..m {
                                out.push(ws[j] * sv + wd[j] * dist.data[idx] + b1.at(head, j) > T::zero());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Propagates the given output adjoints back through the tape and returns
    /// the adjoint of every node (`None` where nothing flowed).
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let keep = matches!(self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &g, &mut grads);
            if keep {
                grads[i] = Some(g);
            }
        }
        grads
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, ta, b, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                let ga = slot(grads, a, va.rows, va.cols);
                if ta {
                    gemm_into(vb, tb, g, true, ga, true);
                } else {
                    gemm_into(g, false, vb, !tb, ga, true);
                }
                let gb = slot(grads, b, vb.rows, vb.cols);
                if tb {
                    gemm_into(g, true, va, ta, gb, true);
                } else {
                    gemm_into(va, !ta, g, false, gb, true);
                }
            }
            &Op::Add(a, b) => {
                accumulate_ref(grads, a, g, |x| x);
                accumulate_ref(grads, b, g, |x| x);
            }
            &Op::Sub(a, b) => {
                accumulate_ref(grads, a, g, |x| x);
                accumulate_ref(grads, b, g, |x| -x);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let ga = zip_map(g, vb, |gx, y| gx * y);
                let gb = zip_map(g, va, |gx, x| gx * x);
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::Div(a, b) => {
                let vb = self.value(b);
                let ga = zip_map(g, vb, |gx, y| gx / y);
                let gb_data = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .zip(&vb.data)
                    .map(|((&gx, &o), &y)| -gx * o / y)
                    .collect();
                accumulate(grads, a, ga);
                accumulate(grads, b, Tensor::from_vec(g.rows, g.cols, gb_data));
            }
            &Op::AddRow { a, row } => {
                accumulate_ref(grads, a, g, |x| x);
                let mut gr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (s, &x) in gr.data.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                accumulate(grads, row, gr);
            }
            &Op::Scale(a, s) => accumulate_ref(grads, a, g, |x| x * s),
            &Op::AddScalar(a) => accumulate_ref(grads, a, g, |x| x),
            &Op::Relu(a) => {
                let ga = zip_map(g, out, |gx, o| if o > T::zero() { gx } else { T::zero() });
                accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = zip_map(g, out, |gx, o| gx * o * (T::one() - o));
                accumulate(grads, a, ga);
            }
            &Op::Tanh(a) => {
                let ga = zip_map(g, out, |gx, o| gx * (T::one() - o * o));
                accumulate(grads, a, ga);
            }
            Op::GatherRows { a, index } => {
                let va = self.value(*a);
                let ga = slot(grads, *a, va.rows, va.cols);
                for (r, &src) in index.iter().enumerate() {
                    for (d, &x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::ScatterAddRows { a, index } => {
                let va = self.value(*a);
                let ga = slot(grads, *a, va.rows, va.cols);
                for (r, &dst) in index.iter().enumerate() {
                    for (d, &x) in ga.row_mut(r).iter_mut().zip(g.row(dst)) {
                        *d += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    let gp = slot(grads, p, g.rows, cols);
                    for r in 0..g.rows {
                        for (d, &x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                            *d += x;
                        }
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let part = Tensor::from_vec(rows, cols, g.data[offset..offset + rows * cols].to_vec());
                    accumulate(grads, p, part);
                    offset += rows * cols;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = g.shape();
                let vg = self.value(*gamma);
                let nr = T::of(rows as f64);
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                let mut sum_dxhat = vec![T::zero(); cols];
                let mut sum_dxhat_xhat = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.at(r, c);
                        let h = xhat.at(r, c);
                        dgamma.data[c] += gv * h;
                        dbeta.data[c] += gv;
                        let dh = gv * vg.data[c];
                        sum_dxhat[c] += dh;
                        sum_dxhat_xhat[c] += dh * h;
                    }
                }
                let gx = slot(grads, *x, rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let dh = g.at(r, c) * vg.data[c];
                        let v = inv_std[c] / nr * (nr * dh - sum_dxhat[c] - xhat.at(r, c) * sum_dxhat_xhat[c]);
                        gx.data[r * cols + c] += v;
                    }
                }
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, h) = vq.shape();
                let n = vk.rows;
                let d = h / heads;
                let inv = T::one() / T::of(d as f64).sqrt();
                let mut gq = Tensor::zeros(t, h);
                let mut gk = Tensor::zeros(n, h);
                let mut gv = Tensor::zeros(n, h);
                for (head, p) in probs.iter().enumerate() {
                    let off = head * d;
                    // dP = dO_h V_h^T
                    let mut dp = Tensor::zeros(t, n);
                    block_gemm(g, off, d, false, vv, off, d, true, &mut dp, 0, n, false);
                    // dV_h += P^T dO_h
                    block_gemm_at(p, g, off, d, &mut gv, off);
                    softmax_backward(p, &mut dp, inv);
                    // dQ_h = dS K_h ; dK_h = dS^T Q_h
                    block_gemm_full_left(&dp, false, vk, off, d, &mut gq, off);
                    block_gemm_full_left(&dp, true, vq, off, d, &mut gk, off);
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
                accumulate(grads, *v, gv);
            }
            Op::MixedScoreAttention { q, k, v, mix, heads, dist, scores, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (w1, b1, w2) = (self.value(mix.w1), self.value(mix.b1), self.value(mix.w2));
                let (nq, h) = vq.shape();
                let nk = vk.rows;
                let d = h / heads;
                let m = b1.cols;
                let inv = T::one() / T::of(d as f64).sqrt();
                let mut gq = Tensor::zeros(nq, h);
                let mut gk = Tensor::zeros(nk, h);
                let mut gv = Tensor::zeros(nk, h);
                let mut gw1 = Tensor::zeros(w1.rows, w1.cols);
                let mut gb1 = Tensor::zeros(b1.rows, b1.cols);
                let mut gw2 = Tensor::zeros(w2.rows, w2.cols);
                let mut gb2 = Tensor::zeros(*heads, 1);
                for head in 0..*heads {
                    let off = head * d;
                    let (s, p) = (&scores[head], &probs[head]);
                    let mut dp = Tensor::zeros(nq, nk);
                    block_gemm(g, off, d, false, vv, off, d, true, &mut dp, 0, nk, false);
                    block_gemm_at(p, g, off, d, &mut gv, off);
                    softmax_backward(p, &mut dp, T::one());
                    // dp now holds dL/dmixed; push through the scoring MLP.
                    let wrow = w1.row(head);
                    let (ws, wd) = wrow.split_at(m);
                    let mut ds = Tensor::zeros(nq, nk);
                    for idx in 0..dp.data.len() {
                        let dm = dp.data[idx];
                        let (sv, dv) = (s.data[idx], dist.data[idx]);
                        gb2.data[head] += dm;
                        let mut dsv = T::zero();
                        for j in 0..m {
                            let pre = ws[j] * sv + wd[j] * dv + b1.at(head, j);
                            if pre > T::zero() {
                                gw2.data[head * m + j] += dm * pre;
                                let dpre = dm * w2.at(head, j);
                                gw1.data[head * 2 * m + j] += dpre * sv;
                                gw1.data[head * 2 * m + m + j] += dpre * dv;
                                gb1.data[head * m + j] += dpre;
                                dsv += dpre * ws[j];
                            }
                        }
                        ds.data[idx] = dsv * inv;
                    }
                    block_gemm_full_left(&ds, false, vk, off, d, &mut gq, off);
                    block_gemm_full_left(&ds, true, vq, off, d, &mut gk, off);
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
                accumulate(grads, *v, gv);
                accumulate(grads, mix.w1, gw1);
                accumulate(grads, mix.b1, gb1);
                accumulate(grads, mix.w2, gw2);
                accumulate(grads, mix.b2, gb2);
            }
            Op::MaskedLogSoftmax { a, mask } => {
                let (rows, cols) = g.shape();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let base = r * cols;
                    let mut gsum = T::zero();
                    for c in 0..cols {
                        if !mask_at(mask, base + c) {
                            gsum += g.data[base + c];
                        }
                    }
                    for c in 0..cols {
                        if !mask_at(mask, base + c) {
                            ga.data[base + c] = g.data[base + c] - out.data[base + c].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::PickCols { a, index } => {
                let va = self.value(*a);
                let ga = slot(grads, *a, va.rows, va.cols);
                for (r, &c) in index.iter().enumerate() {
                    ga.data[r * va.cols + c] += g.data[r];
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        none => *none = Some(g),
    }
}

fn accumulate_ref<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>, f: impl Fn(T) -> T) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data.iter_mut().zip(&g.data) {
                *e += f(x);
            }
        }
        none => *none = Some(g.map(f)),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

/// Scales rows by `scale` then applies a masked softmax in place.
fn softmax_rows<T: Scalar>(s: &mut Tensor<T>, scale: T, mask: &Option<Mask>) {
    let cols = s.cols;
    for r in 0..s.rows {
        let base = r * cols;
        let row = &mut s.data[base..base + cols];
        let mut mx = T::neg_infinity();
        for (c, x) in row.iter_mut().enumerate() {
            *x *= scale;
            if !mask_at(mask, base + c) {
                mx = mx.max(*x);
            }
        }
        if mx == T::neg_infinity() {
            row.iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let mut z = T::zero();
        for (c, x) in row.iter_mut().enumerate() {
            if mask_at(mask, base + c) {
                *x = T::zero();
            } else {
                *x = (*x - mx).exp();
                z += *x;
            }
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
}

/// Turns `dp` (adjoint of softmax output) into the adjoint of the pre-scale
/// logits, folding in the logit `scale`. Masked entries have `p = 0` and so
/// receive zero gradient.
fn softmax_backward<T: Scalar>(p: &Tensor<T>, dp: &mut Tensor<T>, scale: T) {
    let cols = p.cols;
    for r in 0..p.rows {
        let pr = p.row(r);
        let dr = &mut dp.data[r * cols..(r + 1) * cols];
        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in dr.iter_mut().zip(pr) {
            *d = pv * (*d - dot) * scale;
        }
    }
}

/// `out[:, out_off..out_off+out_cols] (+)= A[:, a_off..a_off+d] * op(B[:, b_off..b_off+d])`
/// where `tb` selects `B^T`. Used for per-head score matrices.
#[allow(clippy::too_many_arguments)]
fn block_gemm<T: Scalar>(
    a: &Tensor<T>,
    a_off: usize,
    d: usize,
    ta: bool,
    b: &Tensor<T>,
    b_off: usize,
    bd: usize,
    tb: bool,
    out: &mut Tensor<T>,
    out_off: usize,
    out_cols: usize,
    accumulate: bool,
) {
    debug_assert!(!ta && tb && d == bd);
    let m = a.rows;
    let n = b.rows;
    debug_assert_eq!(out_cols, n);
    let beta = if accumulate { T::one() } else { T::zero() };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the column blocks lie within each tensor; `out` is distinct.
    unsafe {
        T::gemm(
            m,
            d,
            n,
            T::one(),
            a.data.as_ptr().add(a_off),
            a.cols as isize,
            1,
            b.data.as_ptr().add(b_off),
            1,
            b.cols as isize,
            beta,
            out.data.as_mut_ptr().add(out_off),
            out.cols as isize,
            1,
        );
    }
}

/// `out[:, off..off+d] += P * V[:, off..off+d]`
fn block_gemm_into<T: Scalar>(p: &Tensor<T>, v: &Tensor<T>, off: usize, d: usize, out: &mut Tensor<T>, out_off: usize) {
    if p.rows == 0 || p.cols == 0 {
        return;
    }
    // SAFETY: column block within bounds for `v` and `out`.
    unsafe {
        T::gemm(
            p.rows,
            p.cols,
            d,
            T::one(),
            p.data.as_ptr(),
            p.cols as isize,
            1,
            v.data.as_ptr().add(off),
            v.cols as isize,
            1,
            T::one(),
            out.data.as_mut_ptr().add(out_off),
            out.cols as isize,
            1,
        );
    }
}

/// `out[:, out_off..+d] += P^T * G[:, off..off+d]`
fn block_gemm_at<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, off: usize, d: usize, out: &mut Tensor<T>, out_off: usize) {
    if p.rows == 0 || p.cols == 0 {
        return;
    }
    // SAFETY: column block within bounds for `g` and `out`.
    unsafe {
        T::gemm(
            p.cols,
            p.rows,
            d,
            T::one(),
            p.data.as_ptr(),
            1,
            p.cols as isize,
            g.data.as_ptr().add(off),
            g.cols as isize,
            1,
            T::one(),
            out.data.as_mut_ptr().add(out_off),
            out.cols as isize,
            1,
        );
    }
}

/// `out[:, out_off..+d] += op(S) * X[:, off..off+d]` with `op` an optional transpose.
fn block_gemm_full_left<T: Scalar>(s: &Tensor<T>, ts: bool, x: &Tensor<T>, off: usize, d: usize, out: &mut Tensor<T>, out_off: usize) {
    let (m, k) = if ts { (s.cols, s.rows) } else { (s.rows, s.cols) };
    let (rs, cs) = if ts { (1, s.cols as isize) } else { (s.cols as isize, 1) };
    if m == 0 || k == 0 {
        return;
    }
    // SAFETY: column block within bounds for `x` and `out`.
    unsafe {
        T::gemm(
            m,
            k,
            d,
            T::one(),
            s.data.as_ptr(),
            rs,
            cs,
            x.data.as_ptr().add(off),
            x.cols as isize,
            1,
            T::one(),
            out.data.as_mut_ptr().add(out_off),
            out.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w . f(inputs)))/d(inputs) against central differences.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ins: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Vec<Option<Tensor<f64>>>, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let o = tape.value(out).clone();
            let w = weights.cloned().unwrap_or_else(|| Tensor::filled(o.rows, o.cols, 1.0));
            let loss: f64 = o.data.iter().zip(&w.data).filter(|(x, _)| x.is_finite()).map(|(x, y)| x * y).sum();
            let grads = tape.backward(vec![(out, w.clone())]);
            (loss, w, grads, vars)
        };
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).clone()
        };
        let weights = rand_tensor(&mut rng, probe.rows, probe.cols);
        let (_, _, grads, vars) = eval(&inputs, Some(&weights));
        let eps = 1e-6;
        for (ii, var) in vars.iter().enumerate() {
            let analytic = grads[var.index()].clone().unwrap_or_else(|| Tensor::zeros(inputs[ii].rows, inputs[ii].cols));
            for c in 0..inputs[ii].len() {
                let mut plus = inputs.clone();
                plus[ii].data[c] += eps;
                let mut minus = inputs.clone();
                minus[ii].data[c] -= eps;
                let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * eps);
                let an = analytic.data[c];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(err < 1e-5, "input {ii} coord {c}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        check(vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
        check(vec![a.transpose(), b.clone()], |t, v| t.matmul_t(v[0], true, v[1], false));
        check(vec![a.clone(), b.transpose()], |t, v| t.matmul_t(v[0], false, v[1], true));
        check(vec![a.transpose(), b.transpose()], |t, v| t.matmul_t(v[0], true, v[1], true));
        let c = rand_tensor(&mut rng, 3, 4);
        let pos = c.map(|x| x.abs() + 0.5);
        check(vec![a.clone(), pos], |t, v| {
            let m = t.mul(v[0], v[1]);
            let d = t.div(m, v[1]);
            let s = t.sub(d, v[0]);
            let e = t.div(v[0], v[1]);
            let f = t.add(s, e);
            let g = t.sigmoid(f);
            let h = t.tanh(g);
            t.scale(h, 3.0)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 4, 3);
        let row = rand_tensor(&mut rng, 1, 3);
        let idx = Arc::new(vec![2, 0, 2, 3, 1]);
        check(vec![a.clone(), row], |t, v| {
            let r = t.add_row(v[0], v[1]);
            let g = t.gather_rows(r, idx.clone());
            let s = t.scatter_add_rows(g, idx.clone(), 4);
            let c = t.concat_cols(&[s, v[0]]);
            let c2 = t.concat_rows(&[c, c]);
            let c = t.gather_rows(c2, Arc::new(vec![5, 1, 0, 7]));
            let rl = t.relu(c);
            t.add_scalar(rl, 0.3)
        });
    }

    #[test]
    fn batch_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 5, 3);
        let gamma = rand_tensor(&mut rng, 1, 3);
        let beta = rand_tensor(&mut rng, 1, 3);
        check(vec![x, gamma, beta], |t, v| t.batch_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn attention_gradient_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, 3, 4);
        let k = rand_tensor(&mut rng, 5, 4);
        let v = rand_tensor(&mut rng, 5, 4);
        let mask: Mask = Arc::new((0..15).map(|i| i % 4 == 1).collect());
        check(vec![q.clone(), k.clone(), v.clone()], |t, vs| t.attention(vs[0], vs[1], vs[2], 2, Some(mask.clone())));
        check(vec![q, k, v], |t, vs| t.attention(vs[0], vs[1], vs[2], 1, None));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(rand_tensor(&mut rng, 2, 4));
        let k = tape.constant(rand_tensor(&mut rng, 3, 4));
        let v = tape.constant(rand_tensor(&mut rng, 3, 4));
        let mask: Mask = Arc::new(vec![false, true, false, false, false, false]);
        let o = tape.attention(q, k, v, 2, Some(mask));
        let weights = tape.attention_weights(o).unwrap();
        assert_eq!(weights.len(), 2);
        for w in weights {
            for r in 0..2 {
                let total: f64 = w.row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            assert_eq!(w.at(0, 1), 0.0);
        }
    }

    #[test]
    fn mixed_score_attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 4;
        let q = rand_tensor(&mut rng, n, 4);
        let k = rand_tensor(&mut rng, n, 4);
        let v = rand_tensor(&mut rng, n, 4);
        let dist = Arc::new(rand_tensor(&mut rng, n, n).map(|x| x.abs()));
        let w1 = rand_tensor(&mut rng, 2, 6);
        let b1 = rand_tensor(&mut rng, 2, 3);
        let w2 = rand_tensor(&mut rng, 2, 3);
        let b2 = rand_tensor(&mut rng, 2, 1);
        check(vec![q, k, v, w1, b1, w2, b2], |t, vs| {
            let mix = MixVars { w1: vs[3], b1: vs[4], w2: vs[5], b2: vs[6] };
            t.mixed_score_attention(vs[0], vs[1], vs[2], dist.clone(), mix, 2)
        });
    }

    #[test]
    fn masked_log_softmax_and_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, 3, 4);
        let mask: Mask = Arc::new(vec![false, true, false, false, true, true, false, true, false, false, false, false]);
        let idx = Arc::new(vec![0, 2, 3]);
        check(vec![a.clone()], |t, v| {
            let l = t.masked_log_softmax(v[0], Some(mask.clone()));
            t.pick_cols(l, idx.clone())
        });
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(a);
        let l = tape.masked_log_softmax(va, Some(mask.clone()));
        for r in 0..3 {
            let total: f64 = tape.value(l).row(r).iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(tape.value(l).at(0, 1), f64::NEG_INFINITY);
    }
}
