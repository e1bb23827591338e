//! Pooling of per-head feature maps into one unit vector per head.
//!
//! Every feature map is laid out `[batch, heads, seq, D]`; pooling averages
//! over the batch and the sequence (query) axes and L2-normalizes the result.

use crate::error::{Error, Result};
use crate::model::{FmKind, HeadFeatureMaps};
use crate::numerics::{Graph, Real, Tensor, Var};

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::numerics::tape::NORM_EPS);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Pools a `[B, h, T, D]` feature map into `h` unit vectors of length `D`.
pub fn pool_tensor<T: Real>(fm: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let s = fm.shape();
    if s.len() != 4 {
        return Err(Error::shape("pool", s, &[0, 0, 0, 0]));
    }
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    if b == 0 || t == 0 {
        return Err(Error::contract("cannot pool an empty batch"));
    }
    let data = fm.data();
    let mut out = vec![vec![0.0; d]; h];
    for bi in 0..b {
        for (hi, acc) in out.iter_mut().enumerate() {
            let base = (bi * h + hi) * t * d;
            for ti in 0..t {
                for (a, v) in acc.iter_mut().zip(&data[base + ti * d..base + (ti + 1) * d]) {
                    *a += v.to_f64().unwrap_or(f64::NAN);
                }
            }
        }
    }
    let denom = (b * t) as f64;
    Ok(out.into_iter().map(|v| unit(v.into_iter().map(|x| x / denom).collect())).collect())
}

/// Pooled vectors for one site and feature-map kind.
pub fn pool_feature_maps<T: Real>(fms: &HeadFeatureMaps<T>, layer: usize, kind: FmKind) -> Result<Vec<Vec<f64>>> {
    let site = fms.layers.get(layer).ok_or(Error::Index {
        op: "pool_feature_maps",
        index: layer,
        extent: fms.layers.len(),
    })?;
    pool_tensor(site.get(kind))
}

/// Differentiable pooling of a `[B, h, T, D]` node into `[h, D]` unit rows.
pub fn pool_var<T: Real>(g: &mut Graph<T>, fm: Var) -> Result<Var> {
    let s = g.shape(fm);
    if s.len() != 4 {
        return Err(Error::shape("pool", s, &[0, 0, 0, 0]));
    }
    if s[0] == 0 || s[2] == 0 {
        return Err(Error::contract("cannot pool an empty batch"));
    }
    let m = g.mean_axis(fm, 0)?;
    let m = g.mean_axis(m, 1)?;
    g.normalize_rows(m)
}

/// Points fed to K-means: the single weighted kind itself, or the normalized
/// weighted sum of the pooled kinds when several weights are nonzero.
pub fn combine_points(pooled: &[(f64, Vec<Vec<f64>>)]) -> Result<Vec<Vec<f64>>> {
    match pooled {
        [] => Err(Error::contract("no feature-map kind selected")),
        [(_, only)] => Ok(only.clone()),
        [(_, first), ..] => {
            let (k, d) = (first.len(), first.first().map_or(0, Vec::len));
            let mut out = vec![vec![0.0; d]; k];
            for (tau, pts) in pooled {
                if pts.len() != k || pts.iter().any(|p| p.len() != d) {
                    return Err(Error::contract(format!(
                        "weighted feature maps must share a dimension (got {} and {})",
                        d,
                        pts.first().map_or(0, Vec::len)
                    )));
                }
                for (o, p) in out.iter_mut().zip(pts) {
                    o.iter_mut().zip(p).for_each(|(a, v)| *a += tau * v);
                }
            }
            Ok(out.into_iter().map(unit).collect())
        }
    }
}

/// Graph counterpart of [`combine_points`].
pub fn combine_vars<T: Real>(g: &mut Graph<T>, pooled: &[(f64, Var)]) -> Result<Var> {
    match pooled {
        [] => Err(Error::contract("no feature-map kind selected")),
        [(_, only)] => Ok(*only),
        [(t0, first), rest @ ..] => {
            let mut acc = g.scale(*first, crate::numerics::tensor::c(*t0));
            for (tau, v) in rest {
                let s = g.scale(*v, crate::numerics::tensor::c(*tau));
                acc = g.add(acc, s)?;
            }
            g.normalize_rows(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_pool_to_that_row() {
        let row = [3.0, 4.0];
        let fm = Tensor::<f64>::new(vec![2, 1, 1, 2], [row, row].concat()).unwrap();
        let p = pool_tensor(&fm).unwrap();
        assert!((p[0][0] - 0.6).abs() < 1e-12 && (p[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn constant_map_pools_to_uniform_unit() {
        let fm = Tensor::<f64>::full(&[2, 3, 5, 4], 7.0);
        for v in pool_tensor(&fm).unwrap() {
            assert!(v.iter().all(|x| (x - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn two_row_map() {
        let fm = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = pool_tensor(&fm).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((p[0][0] - r).abs() < 1e-12 && (p[0][1] - r).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_error() {
        let fm = Tensor::<f64>::zeros(&[0, 2, 3, 4]);
        assert!(matches!(pool_tensor(&fm), Err(Error::Contract(_))));
    }

    #[test]
    fn graph_pooling_matches_tensor_pooling() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let fm = Tensor::<f64>::new(vec![2, 3, 4, 5], vals).unwrap();
        let mut g = Graph::new();
        let v = g.constant(fm.clone());
        let p = pool_var(&mut g, v).unwrap();
        let direct = pool_tensor(&fm).unwrap();
        for (i, row) in direct.iter().enumerate() {
            for (a, b) in g.value(p).row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_weights_combine_and_normalize() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        let c = combine_points(&[(0.5, a), (0.5, b)]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((c[0][0] - r).abs() < 1e-12 && (c[0][1] - r).abs() < 1e-12);
        assert!(combine_points(&[(1.0, vec![vec![1.0]]), (1.0, vec![vec![1.0, 0.0]])]).is_err());
    }
}
