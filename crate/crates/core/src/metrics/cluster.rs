//! Cluster validity of head groupings: Silhouette Coefficient and Dunn's
//! Index, by default under cosine distance.

use serde::{Deserialize, Serialize};

use crate::numerics::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    Cosine,
    Euclidean,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Cosine => 1.0 - cosine(a, b),
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

fn cluster_count(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Mean silhouette under cosine distance; `None` when fewer than two
/// clusters are present.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    silhouette_with(points, labels, Distance::Cosine)
}

pub fn silhouette_with(points: &[Vec<f64>], labels: &[usize], dist: Distance) -> Option<f64> {
    if points.is_empty() || cluster_count(labels) < 2 {
        return None;
    }
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; groups];
        let mut counts = vec![0usize; groups];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist.eval(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue; // singleton contributes 0
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..groups)
            .filter(|&g| g != own && counts[g] > 0)
            .map(|g| sums[g] / counts[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / points.len() as f64)
}

/// Minimum inter-cluster distance over maximum cluster diameter under cosine
/// distance. `None` with fewer than two clusters; `f64::INFINITY` when every
/// cluster has zero diameter.
pub fn dunn_index(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    dunn_index_with(points, labels, Distance::Cosine)
}

pub fn dunn_index_with(points: &[Vec<f64>], labels: &[usize], dist: Distance) -> Option<f64> {
    if points.is_empty() || cluster_count(labels) < 2 {
        return None;
    }
    let mut min_inter = f64::INFINITY;
    let mut max_diam: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist.eval(&points[i], &points[j]);
            if labels[i] == labels[j] {
                max_diam = max_diam.max(d);
            } else {
                min_inter = min_inter.min(d);
            }
        }
    }
    Some(if max_diam <= 0.0 { f64::INFINITY } else { min_inter / max_diam })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_far_clusters() {
        let pts = vec![vec![1.0, 0.01], vec![1.0, -0.01], vec![0.01, 1.0], vec![-0.01, 1.0]];
        let labels = [0, 0, 1, 1];
        assert!(silhouette(&pts, &labels).unwrap() > 0.9);
        assert!(dunn_index(&pts, &labels).unwrap() > 1.0);
    }

    #[test]
    fn identical_points_score_zero() {
        let pts = vec![vec![1.0, 1.0]; 4];
        assert_eq!(silhouette(&pts, &[0, 0, 1, 1]), Some(0.0));
    }

    #[test]
    fn single_cluster_not_applicable() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(silhouette(&pts, &[0, 0]), None);
        assert_eq!(dunn_index(&pts, &[0, 0]), None);
    }

    #[test]
    fn singletons_are_infinitely_separated() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(dunn_index(&pts, &[0, 1]), Some(f64::INFINITY));
    }

    #[test]
    fn unit_diameter_clusters_ten_apart() {
        let pts = vec![vec![0.0], vec![1.0], vec![11.0], vec![12.0]];
        let di = dunn_index_with(&pts, &[0, 0, 1, 1], Distance::Euclidean).unwrap();
        assert!((di - 10.0).abs() < 1e-12);
    }

    #[test]
    fn merged_clusters_score_below_one() {
        let pts = vec![vec![0.0], vec![2.0], vec![1.0], vec![3.0]];
        let di = dunn_index_with(&pts, &[0, 0, 1, 1], Distance::Euclidean).unwrap();
        assert!(di < 1.0);
    }
}
