//! Aligning freshly discovered centroids with the running EMA centroids so
//! group identities survive re-clustering.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::numerics::cosine;

const EXHAUSTIVE_LIMIT: usize = 8;

/// Returns `perm` with `perm[j]` the EMA slot that new centroid `j` maps to,
/// maximizing the summed cosine similarity of matched pairs.
pub fn match_groups(new: &[Vec<f64>], ema: &[Vec<f64>]) -> Result<Vec<usize>> {
    if new.len() != ema.len() {
        return Err(Error::shape("match_groups", &[new.len()], &[ema.len()]));
    }
    let dim = new.first().map_or(0, Vec::len);
    if new.iter().chain(ema).any(|v| v.len() != dim) {
        return Err(Error::contract("match_groups: centroid dimensions differ"));
    }
    let c = new.len();
    let sim: Vec<Vec<f64>> = new.iter().map(|n| ema.iter().map(|e| cosine(n, e)).collect()).collect();
    if c <= EXHAUSTIVE_LIMIT {
        let mut best = (0..c).collect::<Vec<_>>();
        let mut best_score = f64::NEG_INFINITY;
        for perm in (0..c).permutations(c) {
            let score: f64 = perm.iter().enumerate().map(|(j, &p)| sim[j][p]).sum();
            // strict so the first (lexicographically smallest) optimum wins
            if score > best_score + 1e-12 {
                best_score = score;
                best = perm;
            }
        }
        return Ok(best);
    }
    let mut perm = vec![usize::MAX; c];
    let mut used = vec![false; c];
    let mut pairs: Vec<(usize, usize)> = (0..c).cartesian_product(0..c).collect();
    pairs.sort_by(|a, b| sim[b.0][b.1].total_cmp(&sim[a.0][a.1]).then(a.cmp(b)));
    for (j, e) in pairs {
        if perm[j] == usize::MAX && !used[e] {
            perm[j] = e;
            used[e] = true;
        }
    }
    Ok(perm)
}

/// Relabels `labels` and reorders `centroids` by `perm`.
pub fn apply_permutation(perm: &[usize], labels: &mut [usize], centroids: &mut Vec<Vec<f64>>) {
    labels.iter_mut().for_each(|l| *l = perm[*l]);
    let mut out = vec![Vec::new(); centroids.len()];
    for (j, c) in centroids.drain(..).enumerate() {
        out[perm[j]] = c;
    }
    *centroids = out;
}
