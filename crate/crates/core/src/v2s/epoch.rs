//! The frozen voting epoch and its report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::votes::{score_sum_vote, vote, SiteLedger};
use crate::error::{Error, Result};
use crate::grouping::{combine_points, pattern_scores, pool_tensor, GroupConfig, HiddenUnits, LossVariant, VoteMode};
use crate::metrics::{count_params, estimate_flops};
use crate::model::checkpoint::write_atomic;
use crate::model::{FmKind, HeadMask, LayerFeatureMaps, TokenBatch, TransformerModel};
use crate::numerics::{Real, Tensor};

/// Classifier probabilities `[k][C]` from pooled rows and a `[D, C]` weight.
pub fn classifier_probs_value<T: Real>(points: &[Vec<f64>], w: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let d = points.first().map_or(0, Vec::len);
    if w.rank() != 2 || w.shape()[0] != d || b.len() != w.shape()[1] {
        return Err(Error::shape("classifier", w.shape(), &[d]));
    }
    let groups = w.shape()[1];
    let wv = w.to_f64_vec();
    let bv = b.to_f64_vec();
    Ok(points
        .iter()
        .map(|p| {
            let logits: Vec<f64> = (0..groups)
                .map(|j| bv[j] + p.iter().enumerate().map(|(r, x)| x * wv[r * groups + j]).sum::<f64>())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Pattern scores of every head at one site for each feature-map kind:
/// cosine similarity to the kind's reference centroid of the head's group.
/// Under the categorical loss the clustering input is scored by the
/// classifier's probability of the own group instead.
pub fn site_pattern_scores<T: Real>(
    model: &TransformerModel<T>,
    layer: &LayerFeatureMaps<T>,
    units: &HiddenUnits,
    site: usize,
    labels: &[usize],
    cfg: &GroupConfig,
) -> Result<Vec<(FmKind, Vec<f64>)>> {
    let mut pooled = Vec::with_capacity(3);
    for kind in FmKind::ALL {
        pooled.push(pool_tensor(layer.get(kind))?);
    }
    let categorical = if cfg.variant == LossVariant::Categorical {
        let active: Vec<(f64, Vec<Vec<f64>>)> =
            cfg.active_kinds().into_iter().map(|(k, t)| (t, pooled[k.code() as usize].clone())).collect();
        let prefix = model.sites()[site].prefix();
        let w = model.params.get(&format!("gct.{prefix}.w"))?;
        let b = model.params.get(&format!("gct.{prefix}.b"))?;
        let probs = classifier_probs_value(&combine_points(&active)?, w, b)?;
        Some(crate::grouping::categorical_scores(&probs, labels))
    } else {
        None
    };
    let mut out = Vec::with_capacity(3);
    for kind in FmKind::ALL {
        if let (Some(scores), true) = (&categorical, kind == cfg.primary_kind()) {
            out.push((kind, scores.clone()));
            continue;
        }
        let reference = units
            .reference(site, kind)
            .ok_or_else(|| Error::contract(format!("no {} reference for site {site}", kind.name())))?;
        let points = &pooled[kind.code() as usize];
        if reference.first().map(Vec::len) != points.first().map(Vec::len) {
            return Err(Error::contract(format!(
                "{} reference for site {site} has a different dimension than this batch",
                kind.name()
            )));
        }
        out.push((kind, pattern_scores(points, labels, reference)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub site: String,
    pub labels: Vec<usize>,
    pub votes: Vec<u64>,
    pub eta_sums: Vec<f64>,
    pub mask: Vec<bool>,
    /// Surviving (pillar-of-strength) head indices.
    pub survivors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub groups: usize,
    pub batches: usize,
    pub vote_mode: VoteMode,
    pub rho_satisfied: bool,
    /// Voting ran although the convergence condition did not hold.
    pub forced: bool,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub input_len: usize,
    pub digest_before: String,
    pub digest_after: String,
    pub layers: Vec<LayerReport>,
}

impl PruneReport {
    pub fn mask(&self) -> HeadMask {
        HeadMask { layers: self.layers.iter().map(|l| l.mask.clone()).collect() }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("serializing prune report: {e}")))
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::malformed(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VotingOptions {
    /// Vote even when the convergence condition is not met.
    pub force_rho: bool,
    /// Sequence length for the FLOPs figures.
    pub input_len: usize,
}

impl Default for VotingOptions {
    fn default() -> Self {
        Self { force_rho: false, input_len: 30 }
    }
}

/// Freezes the model, collects votes over every batch with the assignment
/// frozen at the start, tallies them into a mask and installs it.
pub fn run_voting_epoch<T: Real>(
    model: &mut TransformerModel<T>,
    batches: &[TokenBatch],
    units: &HiddenUnits,
    cfg: &GroupConfig,
    opts: VotingOptions,
) -> Result<PruneReport> {
    if model.mask().is_some() || model.is_pruned() {
        return Err(Error::Refused("a head mask is already installed".into()));
    }
    let rho = units.converged(cfg.rho_threshold);
    if !rho && !opts.force_rho {
        return Err(Error::Refused(
            "hidden units have not converged; voting requires the convergence condition".into(),
        ));
    }
    if batches.is_empty() {
        return Err(Error::contract("voting epoch needs at least one batch"));
    }
    let digest_before = model.params.digest();
    let sites = model.sites();
    let mut ledgers: Vec<Option<SiteLedger>> =
        (0..sites.len()).map(|s| units.site(s).map(|u| SiteLedger::new(s, u.labels.clone(), cfg.groups))).collect();
    if ledgers.iter().all(Option::is_none) {
        return Err(Error::contract("no attention site has hidden units"));
    }
    for (b, batch) in batches.iter().enumerate() {
        let (_, fms) = model.infer(batch)?;
        for (s, ledger) in ledgers.iter_mut().enumerate() {
            let Some(ledger) = ledger else { continue };
            let eta = site_pattern_scores(model, &fms.layers[s], units, s, &ledger.labels, cfg)?;
            ledger.record(b, &eta)?;
        }
    }
    let expected = FmKind::ALL.len() * batches.len();
    let mut layers = Vec::with_capacity(sites.len());
    for (s, site) in sites.iter().enumerate() {
        let heads = model.site_heads()[s];
        let layer = match &ledgers[s] {
            Some(l) => {
                let mask = match cfg.vote {
                    VoteMode::ZeroOne => vote(l, expected)?,
                    VoteMode::ScoreSum => score_sum_vote(l, expected)?,
                };
                LayerReport {
                    site: site.prefix(),
                    labels: l.labels.clone(),
                    votes: l.counts(),
                    eta_sums: l.eta_sums.clone(),
                    survivors: (0..heads).filter(|&i| mask[i]).collect(),
                    mask,
                }
            }
            None => LayerReport {
                site: site.prefix(),
                labels: Vec::new(),
                votes: Vec::new(),
                eta_sums: Vec::new(),
                mask: vec![true; heads],
                survivors: (0..heads).collect(),
            },
        };
        layers.push(layer);
    }
    let mask = HeadMask { layers: layers.iter().map(|l| l.mask.clone()).collect() };
    let pruned = model.structural_prune(&mask, cfg.groups)?;
    let report = PruneReport {
        groups: cfg.groups,
        batches: batches.len(),
        vote_mode: cfg.vote,
        rho_satisfied: rho,
        forced: !rho,
        params_before: count_params(model, true),
        params_after: count_params(&pruned, true),
        flops_before: estimate_flops(model, opts.input_len),
        flops_after: estimate_flops(&pruned, opts.input_len),
        input_len: opts.input_len,
        digest_after: model.params.digest(),
        digest_before,
        layers,
    };
    model.apply_head_mask(mask)?;
    Ok(report)
}
