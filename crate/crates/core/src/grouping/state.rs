//! Cross-batch hidden-unit state: per-batch rediscovery, identity matching,
//! EMA-stabilized centroids and the epoch-level convergence test.

use serde::{Deserialize, Serialize};

use super::kmeans::{discover_hidden_units, KMeansOptions};
use super::matching::{apply_permutation, match_groups};
use super::GroupConfig;
use crate::error::{Error, Result};
use crate::model::FmKind;
use crate::numerics::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteUnits {
    /// Latest labels, aligned with the EMA identities.
    pub labels: Vec<usize>,
    /// Latest K-means centroids, in EMA order.
    pub centroids: Vec<Vec<f64>>,
    pub ema: Vec<Vec<f64>>,
    /// Per feature-map kind (value, attention, output order), EMA of the
    /// group means of that kind's pooled vectors under `labels`. These are
    /// the references for pattern scores of every kind.
    pub kind_ema: Vec<Option<Vec<Vec<f64>>>>,
    /// Mean cosine distance between the EMA before and after the last refresh.
    pub last_shift: f64,
}

pub(crate) fn group_means(points: &[Vec<f64>], labels: &[usize], groups: usize) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; groups];
    let mut counts = vec![0usize; groups];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    sums
}

fn ema_update(prev: Option<&Vec<Vec<f64>>>, next: Vec<Vec<f64>>, decay: f64) -> Vec<Vec<f64>> {
    match prev {
        Some(p) if p.len() == next.len() && p.iter().zip(&next).all(|(a, b)| a.len() == b.len()) => p
            .iter()
            .zip(&next)
            .map(|(e, n)| e.iter().zip(n).map(|(a, b)| decay * a + (1.0 - decay) * b).collect())
            .collect(),
        _ => next,
    }
}

/// Hidden units of every attention site. Sites excluded from grouping stay
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenUnits {
    pub sites: Vec<Option<SiteUnits>>,
    /// End-of-epoch EMA snapshots, oldest first, at most two kept.
    pub history: Vec<Vec<Option<Vec<Vec<f64>>>>>,
    pub refreshes: u64,
}

pub(crate) fn mean_cosine_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| 1.0 - cosine(x.as_slice(), y.as_slice())).sum::<f64>() / a.len() as f64
}

impl HiddenUnits {
    pub fn new(sites: usize) -> Self {
        Self { sites: vec![None; sites], history: Vec::new(), refreshes: 0 }
    }

    pub fn site(&self, s: usize) -> Option<&SiteUnits> {
        self.sites.get(s).and_then(Option::as_ref)
    }

    /// Re-clusters one site from this batch's clustering points and folds
    /// the result into the EMA. `kinds` holds this batch's pooled vectors of
    /// each feature-map kind to track as pattern-score references.
    pub fn refresh(
        &mut self,
        site: usize,
        points: &[Vec<f64>],
        kinds: &[(FmKind, Vec<Vec<f64>>)],
        cfg: &GroupConfig,
        seed: u64,
    ) -> Result<&SiteUnits> {
        if site >= self.sites.len() {
            return Err(Error::Index { op: "refresh", index: site, extent: self.sites.len() });
        }
        let opts = KMeansOptions { restarts: cfg.kmeans_restarts, max_iter: cfg.kmeans_max_iter, seed };
        let found = discover_hidden_units(points, cfg.groups, opts)?;
        let (mut labels, mut centroids) = (found.labels, found.centroids);
        let prev = self.sites[site].take();
        let compatible =
            prev.as_ref().is_some_and(|p| p.ema.len() == centroids.len() && p.ema[0].len() == centroids[0].len());
        if compatible {
            let perm = match_groups(&centroids, &prev.as_ref().expect("checked").ema)?;
            apply_permutation(&perm, &mut labels, &mut centroids);
        }
        let prev = prev.filter(|_| compatible);
        let d = cfg.ema_decay;
        let ema = ema_update(prev.as_ref().map(|p| &p.ema), centroids.clone(), d);
        let last_shift = prev.as_ref().map_or(0.0, |p| mean_cosine_distance(&p.ema, &ema));
        let mut kind_ema = prev.as_ref().map_or_else(|| vec![None; 3], |p| p.kind_ema.clone());
        for (kind, pts) in kinds {
            let slot = kind.code() as usize;
            let means = group_means(pts, &labels, cfg.groups);
            kind_ema[slot] = Some(ema_update(kind_ema[slot].as_ref(), means, d));
        }
        self.refreshes += 1;
        Ok(self.sites[site].insert(SiteUnits { labels, centroids, ema, kind_ema, last_shift }))
    }

    /// Reference centroids for pattern scores of `kind` at `site`.
    pub fn reference(&self, site: usize, kind: FmKind) -> Option<&Vec<Vec<f64>>> {
        self.site(site)?.kind_ema.get(kind.code() as usize)?.as_ref()
    }

    /// Records the EMA centroids at the end of an epoch.
    pub fn end_epoch(&mut self) {
        let snap = self.sites.iter().map(|s| s.as_ref().map(|u| u.ema.clone())).collect();
        self.history.push(snap);
        if self.history.len() > 2 {
            self.history.remove(0);
        }
    }

    pub fn converged(&self, threshold: f64) -> bool {
        convergence_check(&self.history, threshold)
    }
}

/// True iff the last two end-of-epoch snapshots exist and every site's mean
/// cosine shift between them is strictly below `threshold`.
pub fn convergence_check(history: &[Vec<Option<Vec<Vec<f64>>>>], threshold: f64) -> bool {
    let [.., prev, curr] = history else { return false };
    if prev.len() != curr.len() {
        return false;
    }
    let mut any = false;
    for (p, c) in prev.iter().zip(curr) {
        match (p, c) {
            (Some(p), Some(c)) => {
                if p.len() != c.len() || mean_cosine_distance(p, c) >= threshold {
                    return false;
                }
                any = true;
            }
            (None, None) => {}
            _ => return false,
        }
    }
    any
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(c: Vec<Vec<f64>>) -> Vec<Option<Vec<Vec<f64>>>> {
        vec![Some(c)]
    }

    #[test]
    fn identical_snapshots_converge() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(convergence_check(&[snap(c.clone()), snap(c)], 0.01));
    }

    #[test]
    fn needs_two_epochs() {
        assert!(!convergence_check(&[snap(vec![vec![1.0]])], 0.01));
        assert!(!convergence_check(&[], 0.01));
    }

    #[test]
    fn rotated_centroid_does_not_converge() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        assert!(!convergence_check(&[snap(a), snap(b)], 0.01));
    }

    #[test]
    fn boundary_is_not_converged() {
        // shift 1 - cos(60°) = 0.5 exactly
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.5, 3f64.sqrt() / 2.0]];
        let shift = mean_cosine_distance(&a, &b);
        assert!(!convergence_check(&[snap(a.clone()), snap(b.clone())], shift));
        assert!(convergence_check(&[snap(a), snap(b)], shift + 1e-9));
    }

    #[test]
    fn refresh_keeps_identities_stable() {
        let cfg = GroupConfig::default();
        let mut hu = HiddenUnits::new(1);
        let pts = vec![vec![1.0, 0.0], vec![0.99, 0.1], vec![0.0, 1.0], vec![0.1, 0.99]];
        let first = hu.refresh(0, &pts, &[(FmKind::Value, pts.clone())], &cfg, 1).unwrap().labels.clone();
        for seed in 2..20 {
            let u = hu.refresh(0, &pts, &[(FmKind::Value, pts.clone())], &cfg, seed).unwrap();
            assert_eq!(u.labels, first);
            assert!(u.last_shift < 1e-12);
        }
        hu.end_epoch();
        hu.end_epoch();
        assert!(hu.converged(0.01));
        let r = hu.reference(0, FmKind::Value).unwrap();
        let u = hu.site(0).unwrap();
        for (a, b) in r.iter().flatten().zip(u.ema.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(hu.reference(0, FmKind::Attention).is_none());
    }
}
