use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FmKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Metric learning over pooled feature maps and centroid vectors.
    Continuous,
    /// Per-site linear classifier predicting each head's group.
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteMode {
    /// One 0-1 vote per group per feature-map kind per batch.
    ZeroOne,
    /// Pattern scores summed over the epoch.
    ScoreSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    /// Number of groups `C` per attention site.
    pub groups: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Feature-map weights in `[value, attention, output]` order.
    pub tau: [f64; 3],
    pub variant: LossVariant,
    /// Convergence threshold on the mean cosine shift of EMA centroids.
    pub rho_threshold: f64,
    pub ema_decay: f64,
    /// Re-run K-means every this many batches.
    pub refresh_every: u64,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    /// Let the diversification term differentiate through group means
    /// instead of treating the centroids as constants.
    pub centroid_grad: bool,
    pub encoder_self: bool,
    pub decoder_self: bool,
    pub cross: bool,
    pub vote: VoteMode,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            alpha: 0.5,
            beta: 0.5,
            tau: [1.0, 0.0, 0.0],
            variant: LossVariant::Continuous,
            rho_threshold: 0.01,
            ema_decay: 0.9,
            refresh_every: 1,
            kmeans_restarts: 16,
            kmeans_max_iter: 100,
            centroid_grad: true,
            encoder_self: true,
            decoder_self: true,
            cross: true,
            vote: VoteMode::ZeroOne,
        }
    }
}

impl GroupConfig {
    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.groups == 0 || self.groups > heads {
            return Err(Error::config("group.groups", format!("must be in 1..={heads}, got {}", self.groups)));
        }
        for (name, v) in [("group.alpha", self.alpha), ("group.beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.tau.iter().any(|t| !(0.0..=1.0).contains(t)) || self.tau.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("group.tau", "entries must lie in [0, 1] and not all be zero"));
        }
        if !(self.rho_threshold > 0.0) {
            return Err(Error::config("group.rho_threshold", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("group.ema_decay", "must lie in [0, 1)"));
        }
        if self.refresh_every == 0 {
            return Err(Error::config("group.refresh_every", "must be >= 1"));
        }
        if self.kmeans_restarts == 0 || self.kmeans_max_iter == 0 {
            return Err(Error::config("group.kmeans_restarts", "restarts and iterations must be >= 1"));
        }
        Ok(())
    }

    /// Feature-map kinds with a nonzero weight, paired with that weight.
    pub fn active_kinds(&self) -> Vec<(FmKind, f64)> {
        FmKind::ALL.iter().zip(self.tau).filter(|(_, t)| *t > 0.0).map(|(k, t)| (*k, t)).collect()
    }

    /// The kind with the largest weight (first on ties).
    pub fn primary_kind(&self) -> FmKind {
        let mut best = 0;
        for j in 1..3 {
            if self.tau[j] > self.tau[best] {
                best = j;
            }
        }
        FmKind::ALL[best]
    }

    /// Whether the group loss contributes anything at all.
    pub fn is_active(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}
