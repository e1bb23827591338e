//! Per-step compactness of the head groups: cluster validity per site plus
//! the two unweighted terms of the continuous group loss.

use serde::{Deserialize, Serialize};

use super::cluster::{dunn_index, silhouette};
use crate::grouping::{diversity_value, homogeneity_value};
use crate::model::FmKind;

/// First term of the continuous group loss with unit weight.
pub fn intra_homogeneity(
    pooled: &[Vec<(f64, Vec<Vec<f64>>)>],
    labels: &[Vec<usize>],
    centroids: &[Vec<Vec<f64>>],
) -> f64 {
    homogeneity_value(pooled, labels, centroids)
}

/// Second term of the continuous group loss with unit weight.
pub fn inter_diversity(centroids: &[Vec<Vec<f64>>]) -> f64 {
    diversity_value(centroids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessSnapshot {
    pub step: u64,
    pub kind: FmKind,
    /// Per participating site, `None` when fewer than two groups exist.
    pub sc: Vec<Option<f64>>,
    pub di: Vec<Option<f64>>,
    pub homogeneity: f64,
    pub diversity: f64,
}

impl CompactnessSnapshot {
    /// `points[s]` are the pooled vectors of `kind` used for SC/DI and
    /// `pooled[s]` the weighted kinds entering the homogenization term.
    pub fn measure(
        step: u64,
        kind: FmKind,
        points: &[Vec<Vec<f64>>],
        pooled: &[Vec<(f64, Vec<Vec<f64>>)>],
        labels: &[Vec<usize>],
        centroids: &[Vec<Vec<f64>>],
    ) -> Self {
        Self {
            step,
            kind,
            sc: points.iter().zip(labels).map(|(p, l)| silhouette(p, l)).collect(),
            di: points.iter().zip(labels).map(|(p, l)| dunn_index(p, l)).collect(),
            homogeneity: intra_homogeneity(pooled, labels, centroids),
            diversity: inter_diversity(centroids),
        }
    }

    /// Mean over sites with a defined value, `NaN` when none.
    pub fn mean_sc(&self) -> f64 {
        mean_defined(&self.sc)
    }

    pub fn mean_di(&self) -> f64 {
        mean_defined(&self.di)
    }

    /// Mean SC over the sites of the last layer. `sites[s]` names site `s`
    /// as `<stack>.<layer>.<kind>`, so a decoder layer contributes both its
    /// self and cross attention.
    pub fn final_layer_sc(&self, sites: &[String]) -> Option<f64> {
        let layer = |name: &str| name.rsplit_once('.').map_or(name.to_string(), |(l, _)| l.to_string());
        let last = layer(sites.last()?);
        let vals: Vec<Option<f64>> =
            sites.iter().zip(&self.sc).filter(|(n, _)| layer(n) == last).map(|(_, v)| *v).collect();
        Some(mean_defined(&vals)).filter(|v| !v.is_nan())
    }
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_on_centroids_and_orthogonal_units() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pts = vec![z[0].clone(), z[0].clone(), z[1].clone()];
        let labels = vec![vec![0, 0, 1]];
        let h = intra_homogeneity(&[vec![(1.0, pts)]], &labels, std::slice::from_ref(&z));
        assert!((h + 1.0).abs() < 1e-12);
        assert_eq!(inter_diversity(&[z]), 0.0);
        let same = vec![vec![1.0, 0.0]; 2];
        assert!((inter_diversity(&[same]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn final_layer_averages_its_sites() {
        let snap = CompactnessSnapshot {
            step: 0,
            kind: FmKind::Value,
            sc: vec![Some(0.1), Some(0.9), Some(0.5), None],
            di: vec![None; 4],
            homogeneity: 0.0,
            diversity: 0.0,
        };
        let names = ["enc.1.self", "dec.1.self", "dec.1.cross", "dec.1.other"].map(String::from);
        assert!((snap.final_layer_sc(&names).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(snap.final_layer_sc(&names[..1]), Some(0.1));
        assert_eq!(snap.final_layer_sc(&[]), None);
    }
}
