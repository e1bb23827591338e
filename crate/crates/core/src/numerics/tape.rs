//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because inputs always precede their consumers.

use std::rc::Rc;

use super::kernels::{self, gemm};
use super::tensor::{axis_split, c, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MaskFill(Var, Rc<Vec<bool>>),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        smoothing: f64,
        probs: Vec<T>,
        counted: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanAxis(Var, usize),
    SumAll(Var),
    CosineRows(Var, Var),
    NormalizeRows(Var),
    ClampLog(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not require gradients or is
    /// not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Norm guard used by cosine and normalization ops.
pub const NORM_EPS: f64 = 1e-12;

/// Operation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ── forward ops ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = kernels::bmm(self.value(a), self.value(b), trans_b)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[..., n] + bias[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.len();
        if bv.rank() != 1 || xv.shape().last() != Some(&n) {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = kernels::permute(self.value(x), perm)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Replaces entries where `mask` is true with negative infinity.
    pub fn mask_fill_neg_inf(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("mask_fill", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(mask.iter()).map(|(&v, &m)| if m { T::neg_infinity() } else { v }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskFill(x, mask), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let (value, stats) = kernels::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), axis)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, axis, xhat: stats.xhat, rstd: stats.rstd }, rg))
    }

    /// Mean label-smoothed cross entropy over rows of `logits [N×V]`; rows
    /// whose target equals `ignore` are skipped. Returns a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (loss, probs, counted) = kernels::cross_entropy_forward(self.value(logits), targets, smoothing, ignore)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, smoothing, probs, counted },
            rg,
        ))
    }

    /// Row lookup `table[ids]` → `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("embedding", tv.shape(), &[]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { op: "embedding", index: id, extent: vocab });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::mean_axis(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanAxis(x, axis), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Row-wise cosine similarity of two `[r×d]` matrices → `[r]`.
    pub fn cosine_rows(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.rank() != 2 || xv.shape() != yv.shape() {
            return Err(Error::shape("cosine_rows", xv.shape(), yv.shape()));
        }
        let rows = xv.shape()[0];
        let data = (0..rows).map(|r| cosine(xv.row(r), yv.row(r))).collect();
        let value = Tensor::new(vec![rows], data)?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, Op::CosineRows(x, y), rg))
    }

    /// L2-normalizes each row of a `[r×d]` matrix.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("normalize_rows", xv.shape(), &[]));
        }
        let d = xv.shape()[1];
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let n = norm_guarded(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows(x), rg))
    }

    /// `ln(max(x, floor))`; entries at or below the floor get zero gradient.
    pub fn clamp_log(&mut self, x: Var, floor: T) -> Var {
        let value = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(value, Op::ClampLog(x, floor), rg)
    }

    // ── backward ──────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, p, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * p];
                    gemm(gd, bv.data(), &mut da, m, n, p, false, true);
                    self.accumulate(grads, *a, Tensor::new(vec![m, p], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); p * n];
                    gemm(av.data(), gd, &mut db, p, m, n, true, false);
                    self.accumulate(grads, *b, Tensor::new(vec![p, n], db)?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, p) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); batch * m * p];
                    for t in 0..batch {
                        let gs = &gd[t * m * n..(t + 1) * m * n];
                        let bs = &bv.data()[t * p * n..(t + 1) * p * n];
                        let out = &mut da[t * m * p..(t + 1) * m * p];
                        // dA = dY · Bᵀ (or dY · B when B was used transposed)
                        gemm(gs, bs, out, m, n, p, false, !*trans_b);
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); batch * p * n];
                    for t in 0..batch {
                        let gs = &gd[t * m * n..(t + 1) * m * n];
                        let as_ = &av.data()[t * m * p..(t + 1) * m * p];
                        let out = &mut db[t * p * n..(t + 1) * p * n];
                        if *trans_b {
                            // B is [n×p]: dB = dYᵀ · A
                            gemm(gs, as_, out, n, m, p, true, false);
                        } else {
                            gemm(as_, gs, out, p, m, n, true, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![n], db)?);
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * *f)),
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Permute(x, perm) => {
                let back = kernels::permute(g, &kernels::inverse_perm(perm))?;
                self.accumulate(grads, *x, back);
            }
            Op::MaskFill(x, mask) => {
                let d = gd.iter().zip(mask.iter()).map(|(&v, &m)| if m { T::zero() } else { v }).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let k = base + j * inner;
                            dot += gd[k] * y[k];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            dx[k] = y[k] * (gd[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gain, bias, axis, xhat, rstd } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                let gain_v = self.value(*gain).data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgain = vec![T::zero(); len];
                let mut dbias = vec![T::zero(); len];
                let n: T = c(len as f64);
                let mut slot = 0;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let r = rstd[slot];
                        slot += 1;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..len {
                            let k = base + j * inner;
                            let dh = gd[k] * gain_v[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[k];
                            dgain[j] += gd[k] * xhat[k];
                            dbias[j] += gd[k];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..len {
                            let k = base + j * inner;
                            let dh = gd[k] * gain_v[j];
                            dx[k] = r * (dh - mean_d - xhat[k] * mean_dx);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                self.accumulate(grads, *gain, Tensor::new(vec![len], dgain)?);
                self.accumulate(grads, *bias, Tensor::new(vec![len], dbias)?);
            }
            Op::CrossEntropy { logits, targets, ignore, smoothing, probs, counted } => {
                let shape = self.shape(*logits).to_vec();
                let vocab = shape[1];
                let mut d = vec![T::zero(); probs.len()];
                if *counted > 0 {
                    let scale = gd[0] / c(*counted as f64);
                    let eps: T = c(*smoothing);
                    let uniform = eps / c(vocab as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for j in 0..vocab {
                            let mut q = uniform;
                            if j == t {
                                q += T::one() - eps;
                            }
                            d[r * vocab + j] = (probs[r * vocab + j] - q) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(shape, d)?);
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let dm = shape[1];
                let mut d = vec![T::zero(); shape[0] * dm];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dm {
                        d[id * dm + j] += gd[r * dm + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(shape, d)?);
            }
            Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis)?;
                let n: T = c(len as f64);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = gd[o * inner + i] / n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, d)?);
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::CosineRows(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let (rows, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![T::zero(); rows * d];
                let mut dy = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let (a, b) = (xv.row(r), yv.row(r));
                    let na = norm(a);
                    let nb = norm(b);
                    let denom = na * nb;
                    let eps: T = c(NORM_EPS);
                    if denom <= eps {
                        // guarded denominator is constant
                        for j in 0..d {
                            dx[r * d + j] = gd[r] * b[j] / eps;
                            dy[r * d + j] = gd[r] * a[j] / eps;
                        }
                        continue;
                    }
                    let cos = node.value.data()[r];
                    for j in 0..d {
                        dx[r * d + j] = gd[r] * (b[j] / denom - cos * a[j] / (na * na));
                        dy[r * d + j] = gd[r] * (a[j] / denom - cos * b[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, d], dx)?);
                self.accumulate(grads, *y, Tensor::new(vec![rows, d], dy)?);
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); xv.len()];
                for r in 0..xv.shape()[0] {
                    let row = xv.row(r);
                    let n = norm(row);
                    let eps: T = c(NORM_EPS);
                    let (gs, ys) = (&gd[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    if n <= eps {
                        for j in 0..d {
                            dx[r * d + j] = gs[j] / eps;
                        }
                        continue;
                    }
                    let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gs[j] - ys[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::ClampLog(x, floor) => {
                let xv = self.value(*x);
                let d = gd.iter().zip(xv.data()).map(|(&gv, &v)| if v > *floor { gv / v } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn norm_guarded<T: Real>(x: &[T]) -> T {
    norm(x).max(c(NORM_EPS))
}

/// Cosine similarity with an ε-guarded denominator.
pub fn cosine<T: Real>(x: &[T], y: &[T]) -> T {
    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    dot / (norm(x) * norm(y)).max(c(NORM_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let d = g.detach(x);
        let y = g.mul(d, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_only_graph_yields_no_gradients() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(1.0));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).unwrap().get(x).is_none());
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0f64, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0f64, 0.0], &[0.0, 1.0]), 0.0);
    }
}
