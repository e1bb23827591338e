//! Checkpoint evaluation and inspection of hidden-unit state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tasks::Split;
use super::trainer::{Stage, Trainer, FLOPS_INPUT_LEN};
use crate::error::{Error, Result};
use crate::grouping::dump::{dump_entries, write_dump};
use crate::metrics::{EfficiencyReport, TaskMetrics};
use crate::model::FmKind;
use crate::v2s::site_pattern_scores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub stage: Stage,
    pub metrics: TaskMetrics,
    pub groups: usize,
    pub masked: bool,
    /// Every masked site keeps exactly `groups` heads.
    pub mask_complete: bool,
    /// Heads kept per attention site.
    pub kept_heads: Vec<usize>,
    pub params: usize,
    pub flops: u64,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("serializing eval report: {e}")))
    }
}

pub fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Error::config("split", format!("expected train, valid or test, got `{other}`"))),
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

pub fn eval_checkpoint(path: &Path, split: Split) -> Result<EvalReport> {
    let t = Trainer::resume(path, None)?;
    let groups = t.config.group.groups;
    let (kept_heads, eff, masked, complete) = match t.model.mask() {
        Some(mask) => {
            let pruned = t.model.structural_prune(mask, groups)?;
            let kept = (0..mask.layers.len()).map(|l| mask.kept(l)).collect();
            (kept, EfficiencyReport::of(&pruned, FLOPS_INPUT_LEN), true, mask.is_complete(groups))
        }
        None => (t.model.site_heads().to_vec(), EfficiencyReport::of(&t.model, FLOPS_INPUT_LEN), false, false),
    };
    Ok(EvalReport {
        split: split_name(split).into(),
        stage: t.state.stage,
        metrics: t.evaluate(split)?,
        groups,
        masked,
        mask_complete: complete,
        kept_heads,
        params: eff.non_embedding_params,
        flops: eff.flops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindScores {
    pub kind: FmKind,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteInspection {
    pub site: String,
    pub heads: usize,
    pub labels: Vec<usize>,
    pub last_shift: f64,
    pub centroids: Vec<Vec<f64>>,
    pub ema: Vec<Vec<f64>>,
    /// Pattern scores on the first training batch.
    pub scores: Vec<KindScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kept: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub stage: Stage,
    pub step: u64,
    pub rho: bool,
    pub refreshes: u64,
    pub sites: Vec<SiteInspection>,
}

impl Inspection {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("serializing inspection: {e}")))
    }
}

/// Hidden units, centroids and pattern scores of every grouped site. With
/// `dump`, the first training batch's feature maps are written there too.
pub fn inspect_checkpoint(path: &Path, dump: Option<&Path>) -> Result<Inspection> {
    let t = Trainer::resume(path, None)?;
    let batch = t
        .batches(Split::Train, None)
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("task has no training examples"))?;
    let (_, fms) = t.model.infer(&batch.batch)?;
    if let Some(p) = dump {
        write_dump(p, &dump_entries(&fms))?;
    }
    let mut sites = Vec::new();
    for (s, site) in t.model.sites().iter().enumerate() {
        let Some(u) = t.state.units.site(s) else { continue };
        let scores = if u.labels.len() == t.model.site_heads()[s] {
            site_pattern_scores(&t.model, &fms.layers[s], &t.state.units, s, &u.labels, &t.config.group)?
                .into_iter()
                .map(|(kind, eta)| KindScores { kind, eta })
                .collect()
        } else {
            Vec::new()
        };
        sites.push(SiteInspection {
            site: site.prefix(),
            heads: t.model.site_heads()[s],
            labels: u.labels.clone(),
            last_shift: u.last_shift,
            centroids: u.centroids.clone(),
            ema: u.ema.clone(),
            scores,
            kept: t.model.mask().map(|m| m.kept_indices(s)),
        });
    }
    Ok(Inspection {
        stage: t.state.stage,
        step: t.state.step,
        rho: t.state.rho,
        refreshes: t.state.units.refreshes,
        sites,
    })
}
