//! Pure tensor kernels. The autodiff tape calls into these for both the
//! forward values and the adjoint computations.

use super::tensor::{axis_split, c, Real, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out[m×n] += op(a) · op(b)` on raw row-major slices, where `op` is an
/// optional transpose. `a` is `m×p` (or `p×m` when `trans_a`), `b` is `p×n`
/// (or `n×p` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    p: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    let a_strides = if trans_a { (1, m) } else { (p, 1) };
    let b_strides = if trans_b { (1, p) } else { (n, 1) };
    T::gemm_strided(m, p, n, a, a_strides, b, b_strides, out, (n, 1));
}

/// Standard matrix product of `[m×p]` and `[p×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, p, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(a.data(), b.data(), &mut out, m, p, n, false, false);
    Tensor::new(vec![m, n], out)
}

/// Batched product `[B×m×p] · [B×p×n]`, or `[B×m×p] · [B×n×p]ᵀ` when `trans_b`.
pub fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let bad = || Error::shape("bmm", a.shape(), b.shape());
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(bad());
    }
    let (batch, m, p) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bp, n) = if trans_b { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
    if bp != p {
        return Err(bad());
    }
    let mut out = vec![T::zero(); batch * m * n];
    for t in 0..batch {
        gemm(
            &a.data()[t * m * p..(t + 1) * m * p],
            &b.data()[t * p * n..(t + 1) * p * n],
            &mut out[t * m * n..(t + 1) * m * n],
            m,
            p,
            n,
            false,
            trans_b,
        );
    }
    Tensor::new(vec![batch, m, n], out)
}

/// Max-shifted softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(src[idx(j)]);
            }
            if mx == T::neg_infinity() {
                // fully masked slice: spread uniformly rather than NaN
                let u = T::one() / c(len as f64);
                for j in 0..len {
                    out[idx(j)] = u;
                }
                continue;
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (src[idx(j)] - mx).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Saved statistics from a layer-norm forward pass.
pub(crate) struct LayerNormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes every slice along `axis` to zero mean and unit variance, then
/// applies `gain` and `bias` (both of the axis extent).
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gain, bias, axis).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_stats<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if gain.len() != len || bias.len() != len {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let eps: T = c(LAYER_NORM_EPS);
    let n: T = c(len as f64);
    let src = x.data();
    let mut y = vec![T::zero(); src.len()];
    let mut xhat = vec![T::zero(); src.len()];
    let mut rstd = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = T::zero();
            for j in 0..len {
                mean += src[base + j * inner];
            }
            mean /= n;
            let mut var = T::zero();
            for j in 0..len {
                let d = src[base + j * inner] - mean;
                var += d * d;
            }
            var /= n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..len {
                let k = base + j * inner;
                let h = (src[k] - mean) * r;
                xhat[k] = h;
                y[k] = h * gain.data()[j] + bias.data()[j];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, LayerNormStats { xhat, rstd }))
}

/// Label-smoothed cross entropy over rows of `logits [N×V]`, averaged over
/// the rows whose target differs from `ignore`. Returns the loss and the
/// per-row softmax probabilities.
pub(crate) fn cross_entropy_forward<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    smoothing: f64,
    ignore: Option<usize>,
) -> Result<(T, Vec<T>, usize)> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::contract(format!("smoothing {smoothing} outside [0,1)")));
    }
    let (rows, vocab) = (logits.shape()[0], logits.shape()[1]);
    let probs = softmax(logits, 1)?.into_data();
    let eps: T = c(smoothing);
    let uniform = eps / c(vocab as f64);
    let mut total = T::zero();
    let mut counted = 0usize;
    for (r, &t) in targets.iter().enumerate().take(rows) {
        if Some(t) == ignore {
            continue;
        }
        if t >= vocab {
            return Err(Error::Index { op: "cross_entropy", index: t, extent: vocab });
        }
        let row = logits.row(r);
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        let mut loss = -(T::one() - eps) * (row[t] - lse);
        if smoothing > 0.0 {
            let sum_logp: T = row.iter().map(|&v| v - lse).sum();
            loss -= uniform * sum_logp;
        }
        total += loss;
        counted += 1;
    }
    let mean = if counted == 0 { T::zero() } else { total / c(counted as f64) };
    Ok((mean, probs, counted))
}

/// Label-smoothed cross entropy (see [`cross_entropy_forward`]).
pub fn cross_entropy_label_smoothed<T: Real>(logits: &Tensor<T>, targets: &[usize], smoothing: f64) -> Result<T> {
    cross_entropy_forward(logits, targets, smoothing, None).map(|(l, _, _)| l)
}

/// Swaps axes according to `perm` (output axis `i` is input axis `perm[i]`).
pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", x.shape(), perm));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Mean over `axis`, removing it from the shape.
pub fn mean_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if len == 0 {
        return Err(Error::contract("mean over empty axis"));
    }
    let mut out = vec![T::zero(); outer * inner];
    let src = x.data();
    for o in 0..outer {
        for j in 0..len {
            let base = (o * len + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += src[base + i];
            }
        }
    }
    let n: T = c(len as f64);
    out.iter_mut().for_each(|v| *v /= n);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}
