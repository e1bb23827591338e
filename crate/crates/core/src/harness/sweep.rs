//! Parameter sweeps over the group loss weights or the group count.
//!
//! Every cell trains without voting and reports the compactness of its
//! final groups next to its task accuracy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::trainer::{derive_seed, Trainer};
use crate::error::{Error, Result};
use crate::model::write_atomic;

const SEED_SWEEP: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Every `(alpha, beta)` pair of the two lists.
    AlphaBetaGrid { alphas: Vec<f64>, betas: Vec<f64> },
    /// `C = 1, 2, …, heads`.
    GroupCount,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::AlphaBetaGrid { .. } => "alpha-beta-grid",
            SweepAxis::GroupCount => "group-count",
        }
    }

    /// Per cell: `(alpha, beta, groups)`.
    pub fn cells(&self, base: &RunConfig) -> Vec<(f64, f64, usize)> {
        match self {
            SweepAxis::AlphaBetaGrid { alphas, betas } => {
                alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b, base.group.groups))).collect()
            }
            SweepAxis::GroupCount => (1..=base.model.heads).map(|c| (base.group.alpha, base.group.beta, c)).collect(),
        }
    }
}

/// One row of the sweep table. Undefined compactness values are `NaN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell: usize,
    pub alpha: f64,
    pub beta: f64,
    pub groups: usize,
    pub seed: u64,
    pub final_sc: f64,
    pub mean_sc: f64,
    pub mean_di: f64,
    pub homogeneity: f64,
    pub diversity: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(c)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        write_atomic(path, &bytes)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("serializing sweep report: {e}")))
    }
}

/// Runs every cell of `axis` from `base`. With `out_dir` each cell writes
/// its artifacts to `cell-<i>/` and the table goes to `sweep.csv`.
pub fn sweep(base: &RunConfig, axis: &SweepAxis, out_dir: Option<&Path>) -> Result<SweepReport> {
    if let SweepAxis::AlphaBetaGrid { alphas, betas } = axis {
        if alphas.is_empty() || betas.is_empty() {
            return Err(Error::config("sweep", "alpha-beta grid needs at least one alpha and one beta"));
        }
    }
    let mut cells = Vec::new();
    for (i, (alpha, beta, groups)) in axis.cells(base).into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.group.alpha = alpha;
        cfg.group.beta = beta;
        cfg.group.groups = groups;
        cfg.train.v2s = false;
        // TOML integers are signed.
        cfg.train.seed = derive_seed(base.train.seed, &[SEED_SWEEP, i as u64]) >> 1;
        let dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("cell-{i}")));
        if let Some(d) = &dir {
            cfg.train.output_dir = d.clone();
        }
        let seed = cfg.train.seed;
        let summary = Trainer::new(cfg, dir)?.run()?;
        let c = summary.compactness.as_ref();
        let get = |f: fn(&super::trainer::CompactnessRecord) -> f64| c.map_or(f64::NAN, f);
        cells.push(SweepCell {
            cell: i,
            alpha,
            beta,
            groups,
            seed,
            final_sc: get(|r| r.final_sc),
            mean_sc: get(|r| r.mean_sc),
            mean_di: get(|r| r.mean_di),
            homogeneity: get(|r| r.homogeneity),
            diversity: get(|r| r.diversity),
            valid_acc: summary.valid.accuracy,
            test_acc: summary.test.accuracy,
        });
    }
    let report = SweepReport { axis: axis.clone(), cells };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        report.write_csv(&d.join("sweep.csv"))?;
        write_atomic(&d.join("sweep.toml"), report.to_toml()?.as_bytes())?;
    }
    Ok(report)
}
