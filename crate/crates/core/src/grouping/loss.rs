//! The group-constrained objective and per-head pattern scores.
//!
//! `phi` is negative cosine similarity, so minimizing the homogenization term
//! pulls each head toward its own centroid and minimizing the
//! diversification term pushes centroids apart.
//!
//! Continuous form, with `n` participating sites and `P = C(C-1)/2` pairs:
//!
//! ```text
//! H = 1/(k n) Σ_l Σ_i Σ_f τ_f φ(e_{f,i,l}, z_{g(i),l})
//! D = -1/(P n) Σ_l Σ_{j1<j2} φ(z_{j1,l}, z_{j2,l})
//! L = α H + β D
//! ```
//!
//! Categorical form over classifier probabilities `p_i`:
//!
//! ```text
//! H = -1/(k n) Σ log p_i(own)
//! D =  1/((C-1) k n) Σ_i Σ_{j≠own} log p_i(j)
//! L = α H + β D
//! ```

use crate::error::{Error, Result};
use crate::model::FmKind;
use crate::numerics::tensor::c;
use crate::numerics::{cosine, Graph, Real, Tensor, Var};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-7;

pub fn phi(x: &[f64], y: &[f64]) -> f64 {
    -cosine(x, y)
}

/// `Σ_f τ_f φ(e_f, z)` over the feature-map kinds with nonzero weight.
pub fn combined_phi(v: &[f64], a: &[f64], o: &[f64], z: &[f64], tau: [f64; 3]) -> Result<f64> {
    let mut total = 0.0;
    for ((e, t), kind) in [v, a, o].into_iter().zip(tau).zip(FmKind::ALL) {
        if t == 0.0 {
            continue;
        }
        if e.len() != z.len() {
            return Err(Error::shape(kind.name(), &[e.len()], &[z.len()]));
        }
        total += t * phi(e, z);
    }
    Ok(total)
}

/// Continuous pattern score: cosine similarity to the own centroid.
pub fn pattern_score(e: &[f64], z: &[f64]) -> f64 {
    -phi(e, z)
}

/// Pattern scores of every head against its assigned centroid.
pub fn pattern_scores(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> Vec<f64> {
    points.iter().zip(labels).map(|(p, &l)| pattern_score(p, &centroids[l])).collect()
}

/// Categorical pattern scores: probability assigned to the own group.
pub fn categorical_scores(probs: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    probs.iter().zip(labels).map(|(p, &l)| p[l]).collect()
}

/// One site's inputs to the continuous loss.
#[derive(Debug, Clone)]
pub struct ContinuousSite {
    /// Pooled unit rows `[k, D]` per weighted feature-map kind.
    pub pooled: Vec<(f64, Var)>,
    /// The clustering input (weighted combination of `pooled`).
    pub combined: Var,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

/// Graph handles to the unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct GctTerms {
    pub homogeneity: Var,
    pub diversity: Var,
    pub loss: Var,
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

fn pair_selectors<T: Real>(groups: usize) -> (Tensor<T>, Tensor<T>, usize) {
    let pairs: Vec<(usize, usize)> = (0..groups).flat_map(|a| (a + 1..groups).map(move |b| (a, b))).collect();
    let p = pairs.len();
    let mut s1 = Tensor::zeros(&[p, groups]);
    let mut s2 = Tensor::zeros(&[p, groups]);
    for (r, (a, b)) in pairs.into_iter().enumerate() {
        s1.data_mut()[r * groups + a] = T::one();
        s2.data_mut()[r * groups + b] = T::one();
    }
    (s1, s2, p)
}

/// Row-averaging matrix `[C, k]` producing each group's mean.
fn group_mean_matrix<T: Real>(labels: &[usize], groups: usize) -> Tensor<T> {
    let k = labels.len();
    let mut counts = vec![0usize; groups];
    labels.iter().for_each(|&l| counts[l] += 1);
    let mut m = Tensor::zeros(&[groups, k]);
    for (i, &l) in labels.iter().enumerate() {
        m.data_mut()[l * k + i] = c(1.0 / counts[l] as f64);
    }
    m
}

fn centroid_tensor<T: Real>(rows: &[&Vec<f64>]) -> Result<Tensor<T>> {
    let d = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| c::<T>(v))).collect();
    Tensor::new(vec![rows.len(), d], data)
}

/// Continuous group loss. With `centroid_grad` the diversification term uses
/// differentiable group means of the clustering input (numerically equal to
/// the K-means centroids); otherwise both terms see constant centroids.
pub fn gct_loss_continuous<T: Real>(
    g: &mut Graph<T>,
    sites: &[ContinuousSite],
    groups: usize,
    alpha: f64,
    beta: f64,
    centroid_grad: bool,
) -> Result<GctTerms> {
    let n = sites.len();
    let mut homog = zero(g);
    let mut divers = zero(g);
    if n == 0 {
        let loss = zero(g);
        return Ok(GctTerms { homogeneity: homog, diversity: divers, loss });
    }
    let (s1, s2, pairs) = pair_selectors::<T>(groups);
    for site in sites {
        let k = site.labels.len();
        if site.centroids.len() != groups || site.labels.iter().any(|&l| l >= groups) {
            return Err(Error::contract("assignment does not match the group count"));
        }
        let assigned: Vec<&Vec<f64>> = site.labels.iter().map(|&l| &site.centroids[l]).collect();
        let z = g.constant(centroid_tensor(&assigned)?);
        for &(tau, e) in &site.pooled {
            if g.shape(e) != g.shape(z) {
                return Err(Error::shape("gct_loss_continuous", g.shape(e), g.shape(z)));
            }
            let cos = g.cosine_rows(e, z)?;
            let s = g.sum_all(cos);
            let term = g.scale(s, c(-tau / (k * n) as f64));
            homog = g.add(homog, term)?;
        }
        if pairs > 0 {
            let zc = if centroid_grad {
                let m = g.constant(group_mean_matrix(&site.labels, groups));
                g.matmul(m, site.combined)?
            } else {
                let all: Vec<&Vec<f64>> = site.centroids.iter().collect();
                g.constant(centroid_tensor(&all)?)
            };
            let a = g.constant(s1.clone());
            let b = g.constant(s2.clone());
            let za = g.matmul(a, zc)?;
            let zb = g.matmul(b, zc)?;
            let cos = g.cosine_rows(za, zb)?;
            let s = g.sum_all(cos);
            let term = g.scale(s, c(1.0 / (pairs * n) as f64));
            divers = g.add(divers, term)?;
        }
    }
    let wh = g.scale(homog, c(alpha));
    let wd = g.scale(divers, c(beta));
    let loss = g.add(wh, wd)?;
    Ok(GctTerms { homogeneity: homog, diversity: divers, loss })
}

/// Per-site classifier probabilities `[k, C]` from pooled rows `[k, D]`.
pub fn classifier_probs<T: Real>(g: &mut Graph<T>, points: Var, weight: Var, bias: Var) -> Result<Var> {
    let logits = g.matmul(points, weight)?;
    let logits = g.add_bias(logits, bias)?;
    g.softmax(logits, 1)
}

/// Categorical group loss over `(probabilities [k, C], labels)` per site.
pub fn gct_loss_categorical<T: Real>(
    g: &mut Graph<T>,
    sites: &[(Var, Vec<usize>)],
    groups: usize,
    alpha: f64,
    beta: f64,
) -> Result<GctTerms> {
    let n = sites.len();
    let mut homog = zero(g);
    let mut divers = zero(g);
    for (probs, labels) in sites {
        let pv = g.value(*probs);
        let k = labels.len();
        if pv.shape() != [k, groups] {
            return Err(Error::shape("gct_loss_categorical", pv.shape(), &[k, groups]));
        }
        for r in 0..k {
            let s: f64 = pv.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::contract(format!("probabilities of head {r} sum to {s}")));
            }
        }
        if labels.iter().any(|&l| l >= groups) {
            return Err(Error::contract("assignment does not match the group count"));
        }
        let mut own = Tensor::<T>::zeros(&[k, groups]);
        let mut other = Tensor::<T>::ones(&[k, groups]);
        for (i, &l) in labels.iter().enumerate() {
            own.data_mut()[i * groups + l] = T::one();
            other.data_mut()[i * groups + l] = T::zero();
        }
        let logp = g.clamp_log(*probs, c(PROB_FLOOR));
        let own = g.constant(own);
        let own = g.mul(logp, own)?;
        let own = g.sum_all(own);
        let own = g.scale(own, c(-1.0 / (k * n) as f64));
        homog = g.add(homog, own)?;
        if groups > 1 {
            let other = g.constant(other);
            let rest = g.mul(logp, other)?;
            let rest = g.sum_all(rest);
            let rest = g.scale(rest, c(1.0 / ((groups - 1) * k * n) as f64));
            divers = g.add(divers, rest)?;
        }
    }
    let wh = g.scale(homog, c(alpha));
    let wd = g.scale(divers, c(beta));
    let loss = g.add(wh, wd)?;
    Ok(GctTerms { homogeneity: homog, diversity: divers, loss })
}

/// Unweighted homogenization term over plain vectors. `pooled[s]` holds, per
/// weighted kind, the kind's weight and its `[k][D]` unit rows.
pub fn homogeneity_value(
    pooled: &[Vec<(f64, Vec<Vec<f64>>)>],
    labels: &[Vec<usize>],
    centroids: &[Vec<Vec<f64>>],
) -> f64 {
    let n = pooled.len();
    let mut total = 0.0;
    for ((kinds, labels), cents) in pooled.iter().zip(labels).zip(centroids) {
        let k = labels.len();
        for (tau, pts) in kinds {
            for (p, &l) in pts.iter().zip(labels) {
                total += tau * phi(p, &cents[l]) / (k * n) as f64;
            }
        }
    }
    total
}

/// Unweighted diversification term over plain centroid sets.
pub fn diversity_value(centroids: &[Vec<Vec<f64>>]) -> f64 {
    let n = centroids.len();
    let mut total = 0.0;
    for cents in centroids {
        let groups = cents.len();
        let pairs = groups * groups.saturating_sub(1) / 2;
        if pairs == 0 {
            continue;
        }
        for a in 0..groups {
            for b in a + 1..groups {
                total -= phi(&cents[a], &cents[b]) / (pairs * n) as f64;
            }
        }
    }
    total
}
