//! Lloyd's K-means with k-means++ seeding, used to discover the hidden units
//! of each attention layer from its pooled head feature maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Result of one clustering. Labels are 0-based group indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { restarts: 16, max_iter: 100, seed: 0 }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squared distances to each cluster's mean.
pub fn partition_cost(points: &[Vec<f64>], labels: &[usize], groups: usize) -> f64 {
    let centroids = means(points, labels, groups);
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

fn means(points: &[Vec<f64>], labels: &[usize], groups: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; groups];
    let mut counts = vec![0usize; groups];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Reassigns each point to its nearest centroid (ties to the lowest index).
pub fn lloyd_assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids)).collect()
}

/// One Lloyd iteration from a labelling: recompute means, then reassign.
pub fn lloyd_step(points: &[Vec<f64>], labels: &[usize], groups: usize) -> Vec<usize> {
    lloyd_assign(points, &means(points, labels, groups))
}

fn plus_plus_seed(points: &[Vec<f64>], groups: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < groups {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| chosen.iter().map(|&c| sq_dist(p, &points[c])).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = weights.len() - 1;
            for (i, &w) in weights.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            // all remaining points coincide with a chosen center
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves the member farthest from its centroid, taken from the largest
/// cluster, into each empty cluster.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], groups: usize) -> bool {
    let mut changed = false;
    loop {
        let mut counts = vec![0usize; groups];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            break;
        };
        let largest = (0..groups).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap_or(0);
        if counts[largest] < 2 {
            break;
        }
        let centroids = means(points, labels, groups);
        let far = (0..points.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &centroids[largest])
                    .total_cmp(&sq_dist(&points[b], &centroids[largest]))
                    .then(b.cmp(&a))
            })
            .expect("largest cluster has members");
        labels[far] = empty;
        changed = true;
    }
    changed
}

fn lloyd(points: &[Vec<f64>], groups: usize, seeds: Vec<Vec<f64>>, max_iter: usize) -> Clustering {
    let mut labels = lloyd_assign(points, &seeds);
    repair_empty(points, &mut labels, groups);
    for _ in 0..max_iter {
        let mut next = lloyd_step(points, &labels, groups);
        repair_empty(points, &mut next, groups);
        if next == labels {
            break;
        }
        labels = next;
    }
    let centroids = means(points, &labels, groups);
    let cost = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    Clustering { labels, centroids, cost }
}

/// Partitions `points` (one per head) into `groups` clusters. The best of
/// `restarts` k-means++ seeded Lloyd runs is returned; every group is
/// non-empty whenever there are at least as many points as groups.
pub fn discover_hidden_units(points: &[Vec<f64>], groups: usize, opts: KMeansOptions) -> Result<Clustering> {
    if groups == 0 || groups > points.len() {
        return Err(Error::config("group.groups", format!("{groups} groups for {} heads", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::contract("pooled vectors must be finite and share a dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..opts.restarts.max(1) {
        let seeds = plus_plus_seed(points, groups, &mut rng);
        let run = lloyd(points, groups, seeds, opts.max_iter);
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_obvious_pairs() {
        let pts = vec![vec![1.0, 0.02], vec![0.98, -0.01], vec![0.01, 1.0], vec![-0.02, 0.99]];
        let c = discover_hidden_units(&pts, 2, KMeansOptions::default()).unwrap();
        assert_eq!(c.labels[0], c.labels[1]);
        assert_eq!(c.labels[2], c.labels[3]);
        assert_ne!(c.labels[0], c.labels[2]);
    }

    #[test]
    fn single_group_centroid_is_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![2.0, 4.0]];
        let c = discover_hidden_units(&pts, 1, KMeansOptions::default()).unwrap();
        assert_eq!(c.labels, vec![0, 0, 0]);
        assert!((c.centroids[0][0] - 2.0).abs() < 1e-12 && (c.centroids[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_group_per_head() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let c = discover_hidden_units(&pts, 3, KMeansOptions::default()).unwrap();
        let mut l = c.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
        assert_eq!(c.cost, 0.0);
    }

    #[test]
    fn duplicate_points_still_fill_every_group() {
        let pts = vec![vec![1.0, 0.0]; 4];
        let c = discover_hidden_units(&pts, 3, KMeansOptions::default()).unwrap();
        for g in 0..3 {
            assert!(c.labels.contains(&g));
        }
    }

    #[test]
    fn too_many_groups_is_config_error() {
        let pts = vec![vec![0.0]; 2];
        assert!(matches!(discover_hidden_units(&pts, 3, KMeansOptions::default()), Err(Error::Config { .. })));
    }

    #[test]
    fn result_is_a_lloyd_fixpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let pts: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let c = discover_hidden_units(&pts, 3, KMeansOptions { seed: trial, ..Default::default() }).unwrap();
            assert_eq!(lloyd_step(&pts, &c.labels, 3), c.labels);
        }
    }
}
