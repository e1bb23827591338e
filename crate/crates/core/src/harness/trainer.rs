//! The staged training driver.
//!
//! Stage 1 optimizes the task loss plus the group loss and refreshes the
//! hidden units every batch. When the hidden units have converged the
//! voting epoch keeps one head per group, then stage 2 finetunes the masked
//! network on the task loss alone. Runs without voting end after stage 1.
//!
//! Artifacts in the output directory, all written atomically except the
//! append-only metrics log:
//!
//! ```text
//! config.toml        the resolved run configuration
//! metrics.csv        one row per logging interval
//! last.ckpt          end of the latest epoch
//! final.ckpt         end of the run
//! prune_report.toml  after the voting epoch
//! compactness.toml   head-group compactness at the end of stage 1
//! summary.toml       final metrics and efficiency figures
//! diagnostic.toml    only when a non-finite loss aborted the run
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::tasks::{generate, make_batches, LabeledBatch, Split, TaskData};
use crate::error::{Error, Result};
use crate::grouping::state::group_means;
use crate::grouping::{
    classifier_probs, combine_points, combine_vars, gct_loss_categorical, gct_loss_continuous, pool_tensor, pool_var,
    ContinuousSite, GroupConfig, HiddenUnits, LossVariant,
};
use crate::metrics::{
    read_metrics, task_metrics, CompactnessSnapshot, EfficiencyReport, MetricsLog, MetricsRow, TaskMetrics, TaskTally,
};
use crate::model::transformer::site_enabled;
use crate::model::{
    write_atomic, Architecture, AttentionCapture, AttentionKind, AttentionSite, Checkpoint, DropoutStream, FmKind,
    TokenBatch, TransformerModel, PAD,
};
use crate::numerics::{adam_step, BoundParams, Graph, OptimizerState, Real, Tensor, Var};
use crate::v2s::{run_voting_epoch, PruneReport, VotingOptions};

/// FLOPs figures use this input length.
pub const FLOPS_INPUT_LEN: usize = 30;

const SEED_INIT: u64 = 1;
const SEED_DATA: u64 = 2;
const SEED_SHUFFLE: u64 = 3;
const SEED_DROPOUT: u64 = 4;
const SEED_KMEANS: u64 = 5;
const SEED_CLASSIFIER: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a purpose tag and indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ splitmix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1-gct")]
    Stage1,
    #[serde(rename = "voting")]
    Voting,
    #[serde(rename = "stage2-finetune")]
    Stage2,
    #[serde(rename = "done")]
    Done,
}

impl Stage {
    /// Legal transitions. `Done -> Voting` reopens a run that finished
    /// stage 1 without voting; callers check it has not voted yet.
    pub fn can_advance(self, to: Stage) -> bool {
        use Stage::*;
        matches!((self, to), (Stage1, Voting) | (Stage1, Done) | (Voting, Stage2) | (Stage2, Done) | (Done, Voting))
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1-gct",
            Stage::Voting => "voting",
            Stage::Stage2 => "stage2-finetune",
            Stage::Done => "done",
        }
    }
}

/// Group compactness in a form every text format can hold: undefined
/// values are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessRecord {
    pub step: u64,
    pub kind: FmKind,
    pub sites: Vec<String>,
    pub sc: Vec<f64>,
    pub di: Vec<f64>,
    pub mean_sc: f64,
    pub mean_di: f64,
    /// Mean SC over the last layer's participating sites.
    pub final_sc: f64,
    pub homogeneity: f64,
    pub diversity: f64,
}

impl CompactnessRecord {
    pub fn new(snap: &CompactnessSnapshot, sites: Vec<String>) -> Self {
        let nan = |v: &[Option<f64>]| v.iter().map(|x| x.unwrap_or(f64::NAN)).collect();
        let final_sc = snap.final_layer_sc(&sites).unwrap_or(f64::NAN);
        Self {
            step: snap.step,
            kind: snap.kind,
            sites,
            sc: nan(&snap.sc),
            di: nan(&snap.di),
            mean_sc: snap.mean_sc(),
            mean_di: snap.mean_di(),
            final_sc,
            homogeneity: snap.homogeneity,
            diversity: snap.diversity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub stage: Stage,
    /// Epochs finished in the current stage.
    pub epoch: u64,
    /// Optimizer steps over the whole run.
    pub step: u64,
    /// Steps in the current stage; drives the learning-rate schedule.
    pub stage_step: u64,
    pub stage1_epochs: u64,
    pub rho: bool,
    pub voted: bool,
    pub forced: bool,
    pub bad_epochs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_valid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unpruned_valid: Option<TaskMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unpruned_test: Option<TaskMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compactness: Option<CompactnessRecord>,
    #[serde(with = "units_doc")]
    pub units: HiddenUnits,
}

impl RunState {
    pub fn new(sites: usize) -> Self {
        Self {
            stage: Stage::Stage1,
            epoch: 0,
            step: 0,
            stage_step: 0,
            stage1_epochs: 0,
            rho: false,
            voted: false,
            forced: false,
            bad_epochs: 0,
            best_valid: None,
            stop_reason: None,
            unpruned_valid: None,
            unpruned_test: None,
            compactness: None,
            units: HiddenUnits::new(sites),
        }
    }

    pub fn advance(&mut self, to: Stage) -> Result<()> {
        if !self.stage.can_advance(to) || (to == Stage::Voting && self.voted) {
            return Err(Error::Refused(format!("illegal stage transition {} -> {}", self.stage.name(), to.name())));
        }
        self.stage = to;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("serializing run state: {e}")))
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::malformed(origin, format!("run state: {}", e.message())))
    }
}

/// Hidden units without optional array entries, which TOML cannot hold.
mod units_doc {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::grouping::{HiddenUnits, SiteUnits};
    use crate::model::FmKind;

    #[derive(Serialize, Deserialize)]
    struct KindDoc {
        kind: FmKind,
        means: Vec<Vec<f64>>,
    }

    #[derive(Serialize, Deserialize)]
    struct SiteDoc {
        site: usize,
        labels: Vec<usize>,
        last_shift: f64,
        centroids: Vec<Vec<f64>>,
        ema: Vec<Vec<f64>>,
        kinds: Vec<KindDoc>,
    }

    #[derive(Serialize, Deserialize)]
    struct SnapDoc {
        site: usize,
        ema: Vec<Vec<f64>>,
    }

    #[derive(Serialize, Deserialize)]
    struct HistoryDoc {
        sites: Vec<SnapDoc>,
    }

    #[derive(Serialize, Deserialize)]
    struct Doc {
        count: usize,
        refreshes: u64,
        sites: Vec<SiteDoc>,
        history: Vec<HistoryDoc>,
    }

    pub fn serialize<S: Serializer>(u: &HiddenUnits, s: S) -> Result<S::Ok, S::Error> {
        let sites = u
            .sites
            .iter()
            .enumerate()
            .filter_map(|(i, x)| x.as_ref().map(|x| (i, x)))
            .map(|(site, x)| SiteDoc {
                site,
                labels: x.labels.clone(),
                last_shift: x.last_shift,
                centroids: x.centroids.clone(),
                ema: x.ema.clone(),
                kinds: FmKind::ALL
                    .iter()
                    .zip(&x.kind_ema)
                    .filter_map(|(&kind, m)| m.as_ref().map(|means| KindDoc { kind, means: means.clone() }))
                    .collect(),
            })
            .collect();
        let history = u
            .history
            .iter()
            .map(|snap| HistoryDoc {
                sites: snap
                    .iter()
                    .enumerate()
                    .filter_map(|(site, e)| e.as_ref().map(|ema| SnapDoc { site, ema: ema.clone() }))
                    .collect(),
            })
            .collect();
        Doc { count: u.sites.len(), refreshes: u.refreshes, sites, history }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<HiddenUnits, D::Error> {
        use serde::de::Error;
        let doc = Doc::deserialize(d)?;
        let mut u = HiddenUnits::new(doc.count);
        u.refreshes = doc.refreshes;
        for s in doc.sites {
            let slot = u.sites.get_mut(s.site).ok_or_else(|| D::Error::custom("site index out of range"))?;
            let mut kind_ema = vec![None; 3];
            for k in s.kinds {
                kind_ema[k.kind.code() as usize] = Some(k.means);
            }
            *slot = Some(SiteUnits {
                labels: s.labels,
                centroids: s.centroids,
                ema: s.ema,
                kind_ema,
                last_shift: s.last_shift,
            });
        }
        for h in doc.history {
            let mut snap = vec![None; doc.count];
            for e in h.sites {
                *snap.get_mut(e.site).ok_or_else(|| D::Error::custom("site index out of range"))? = Some(e.ema);
            }
            u.history.push(snap);
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: Stage,
    pub stop_reason: String,
    pub steps: u64,
    pub stage1_epochs: u64,
    /// Finetuning epochs, 0 without voting.
    pub stage2_epochs: u64,
    pub rho: bool,
    pub voted: bool,
    pub forced: bool,
    /// Non-embedding parameters of the structurally pruned network.
    pub params: usize,
    pub flops: u64,
    pub kept_heads: Vec<usize>,
    pub valid: TaskMetrics,
    pub test: TaskMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unpruned_valid: Option<TaskMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unpruned_test: Option<TaskMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compactness: Option<CompactnessRecord>,
}

impl RunSummary {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("serializing summary: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::malformed(path, e.message().to_string()))
    }
}

/// Plain per-site values behind one compactness measurement.
struct SiteMeasure {
    points: Vec<Vec<f64>>,
    pooled: Vec<(f64, Vec<Vec<f64>>)>,
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

fn snapshot(step: u64, kind: FmKind, sites: &[SiteMeasure]) -> CompactnessSnapshot {
    let points: Vec<_> = sites.iter().map(|s| s.points.clone()).collect();
    let pooled: Vec<_> = sites.iter().map(|s| s.pooled.clone()).collect();
    let labels: Vec<_> = sites.iter().map(|s| s.labels.clone()).collect();
    let centroids: Vec<_> = sites.iter().map(|s| s.centroids.clone()).collect();
    CompactnessSnapshot::measure(step, kind, &points, &pooled, &labels, &centroids)
}

fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = t.shape().get(1).copied().unwrap_or(0).max(1);
    t.to_f64_vec().chunks(d).map(<[f64]>::to_vec).collect()
}

fn scalar<T: Real>(t: &Tensor<T>) -> f64 {
    t.item().to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, Default)]
struct GroupRow {
    loss: f64,
    homogeneity: f64,
    diversity: f64,
    sc: f64,
    di: f64,
}

impl GroupRow {
    fn undefined() -> Self {
        Self { loss: 0.0, homogeneity: f64::NAN, diversity: f64::NAN, sc: f64::NAN, di: f64::NAN }
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub data: TaskData,
    pub model: TransformerModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub state: RunState,
    out_dir: Option<PathBuf>,
    log: Option<MetricsLog>,
}

impl Trainer {
    /// Fresh run. `out_dir` of `None` keeps everything in memory.
    pub fn new(config: RunConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        let mut config = config;
        config.validate_static()?;
        let seed = config.train.seed;
        let data = generate(&config.task, derive_seed(seed, &[SEED_DATA]))?;
        if config.model.vocab == 0 {
            config.model.vocab = data.vocab;
        } else if config.model.vocab < data.vocab {
            return Err(Error::config(
                "model.vocab",
                format!("task needs {} ids, model has {}", data.vocab, config.model.vocab),
            ));
        }
        let mut model = TransformerModel::init(config.model.clone(), derive_seed(seed, &[SEED_INIT]))?;
        let sites = model.sites();
        let mut trainer = Self {
            state: RunState::new(sites.len()),
            optimizer: OptimizerState::new(config.train.adam()),
            model: model.clone(),
            data,
            config,
            out_dir,
            log: None,
        };
        trainer.check_lengths()?;
        let dims = trainer.group_dims()?;
        if trainer.config.group.variant == LossVariant::Categorical {
            let groups = trainer.config.group.groups;
            for (s, site) in sites.iter().enumerate() {
                let Some(d) = dims[s] else { continue };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_CLASSIFIER, s as u64]));
                let bound = (6.0 / (d + groups) as f64).sqrt();
                let w = (0..d * groups).map(|_| rng.random_range(-bound..bound) as f32).collect();
                let prefix = site.prefix();
                model.params.insert(format!("gct.{prefix}.w"), Tensor::new(vec![d, groups], w)?);
                model.params.insert(format!("gct.{prefix}.b"), Tensor::zeros(&[groups]));
            }
            trainer.model = model;
        }
        Ok(trainer)
    }

    /// Continues the run stored in a checkpoint. Artifacts go next to the
    /// checkpoint unless `out_dir` says otherwise.
    pub fn resume(path: &Path, out_dir: Option<PathBuf>) -> Result<Self> {
        let ckpt = Checkpoint::<f32>::load(path)?;
        let text =
            ckpt.run_config.as_deref().ok_or_else(|| Error::malformed(path, "checkpoint carries no run config"))?;
        let mut config = RunConfig::from_toml_str(text, path, &[])?;
        let state_text =
            ckpt.run_state.as_deref().ok_or_else(|| Error::malformed(path, "checkpoint carries no run state"))?;
        let state = RunState::from_toml(state_text, path)?;
        let dir = out_dir.unwrap_or_else(|| path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
        config.train.output_dir = dir.clone();
        let data = generate(&config.task, derive_seed(config.train.seed, &[SEED_DATA]))?;
        if state.units.sites.len() != ckpt.model.sites().len() {
            return Err(Error::malformed(path, "run state does not match the model's attention sites"));
        }
        let optimizer = ckpt.optimizer.unwrap_or_else(|| OptimizerState::new(config.train.adam()));
        Ok(Self { config, data, model: ckpt.model, optimizer, state, out_dir: Some(dir), log: None })
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    fn check_lengths(&self) -> Result<()> {
        let m = &self.config.model;
        let (src, tgt) = (self.data.max_src, self.data.max_tgt + 1);
        let need = match m.architecture {
            Architecture::EncoderDecoder => src.max(tgt),
            Architecture::DecoderOnly => src + tgt,
        };
        if need > m.max_len {
            return Err(Error::config(
                "model.max_len",
                format!("task sequences need {need} positions, model covers {}", m.max_len),
            ));
        }
        Ok(())
    }

    fn key_len(&self, site: &AttentionSite) -> usize {
        let (src, tgt) = (self.data.max_src, self.data.max_tgt + 1);
        match (self.config.model.architecture, site.kind) {
            (Architecture::DecoderOnly, _) => src + tgt,
            (_, AttentionKind::DecoderSelf) => tgt,
            _ => src,
        }
    }

    /// Clustering-input dimension per site, `None` for sites left out of
    /// grouping.
    fn group_dims(&self) -> Result<Vec<Option<usize>>> {
        let g = &self.config.group;
        let dk = self.config.model.head_dim();
        self.model
            .sites()
            .iter()
            .map(|site| {
                if !self.site_grouped(site) {
                    return Ok(None);
                }
                let dims: Vec<usize> = g
                    .active_kinds()
                    .iter()
                    .map(|(k, _)| match k {
                        FmKind::Attention => self.key_len(site),
                        _ => dk,
                    })
                    .collect();
                if dims.windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::config(
                        "group.tau",
                        format!("weighted feature maps at {site} have different dimensions {dims:?}"),
                    ));
                }
                Ok(dims.first().copied())
            })
            .collect()
    }

    fn site_grouped(&self, site: &AttentionSite) -> bool {
        let g = &self.config.group;
        site_enabled(site.kind, g.encoder_self, g.decoder_self, g.cross)
    }

    pub fn batches(&self, split: Split, shuffle_seed: Option<u64>) -> Vec<LabeledBatch> {
        make_batches(
            self.data.split(split),
            self.config.train.batch_size,
            self.config.model.architecture,
            self.data.max_src,
            self.data.max_tgt,
            shuffle_seed,
        )
    }

    /// Teacher-forced task metrics of the current model on a split.
    pub fn evaluate(&self, split: Split) -> Result<TaskMetrics> {
        evaluate_model(&self.model, &self.batches(split, None))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut cfg = self.config.clone();
        cfg.train.output_dir = PathBuf::from(".");
        let mut ckpt = Checkpoint::new(self.model.clone());
        ckpt.optimizer = Some(self.optimizer.clone());
        ckpt.run_state = Some(self.state.to_toml()?);
        ckpt.run_config = Some(cfg.to_toml()?);
        Ok(ckpt)
    }

    fn artifact(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    /// Creates the output directory, writes the config and opens the
    /// metrics log, dropping rows past the current step.
    fn open_artifacts(&mut self) -> Result<()> {
        let Some(dir) = self.out_dir.clone() else { return Ok(()) };
        if self.log.is_some() {
            return Ok(());
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join("config.toml");
        if self.state.step == 0 || !cfg_path.exists() {
            let mut cfg = self.config.clone();
            cfg.train.output_dir = dir.clone();
            write_atomic(&cfg_path, cfg.to_toml()?.as_bytes())?;
        }
        let log_path = dir.join("metrics.csv");
        if log_path.exists() {
            let keep: Vec<MetricsRow> = if self.state.step == 0 {
                Vec::new()
            } else {
                read_metrics(&log_path)?.into_iter().filter(|r| r.step < self.state.step).collect()
            };
            std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = MetricsLog::open(&log_path)?;
            for r in &keep {
                log.append(r)?;
            }
            self.log = Some(log);
        } else {
            self.log = Some(MetricsLog::open(&log_path)?);
        }
        Ok(())
    }

    fn save_last(&self) -> Result<()> {
        if self.config.train.checkpoint_every_epoch {
            if let Some(p) = self.artifact("last.ckpt") {
                self.checkpoint()?.save(&p)?;
            }
        }
        Ok(())
    }

    /// Runs until the stage machine reaches `Done`.
    pub fn run(&mut self) -> Result<RunSummary> {
        self.open_artifacts()?;
        loop {
            match self.state.stage {
                Stage::Stage1 => self.stage1_epoch()?,
                Stage::Voting => {
                    return Err(Error::contract("checkpoint was taken inside the voting epoch"));
                }
                Stage::Stage2 => self.stage2_epoch()?,
                Stage::Done => break,
            }
        }
        self.finish()
    }

    fn track_valid(&mut self, acc: f64) {
        match self.state.best_valid {
            Some(b) if acc <= b => self.state.bad_epochs += 1,
            _ => {
                self.state.best_valid = Some(acc);
                self.state.bad_epochs = 0;
            }
        }
    }

    fn record_unpruned(&mut self) -> Result<()> {
        if self.state.unpruned_valid.is_none() {
            self.state.unpruned_valid = Some(self.evaluate(Split::Valid)?);
            self.state.unpruned_test = Some(self.evaluate(Split::Test)?);
        }
        Ok(())
    }

    /// One stage-1 epoch plus the end-of-epoch decisions.
    pub fn stage1_epoch(&mut self) -> Result<()> {
        if self.state.stage != Stage::Stage1 {
            return Err(Error::Refused(format!("not in stage 1 (at {})", self.state.stage.name())));
        }
        self.open_artifacts()?;
        let seed = self.config.train.seed;
        let batches = self.batches(Split::Train, Some(derive_seed(seed, &[SEED_SHUFFLE, 1, self.state.epoch])));
        for lb in &batches {
            self.train_step(lb, true)?;
        }
        self.state.units.end_epoch();
        self.state.epoch += 1;
        self.state.stage1_epochs = self.state.epoch;
        let valid = self.evaluate(Split::Valid)?;
        self.track_valid(valid.accuracy);
        self.state.rho = self.state.units.converged(self.config.group.rho_threshold);
        self.state.compactness = self.measure_compactness()?;
        if let (Some(c), Some(p)) = (&self.state.compactness, self.artifact("compactness.toml")) {
            let text = toml::to_string(c).map_err(|e| Error::contract(format!("serializing compactness: {e}")))?;
            write_atomic(&p, text.as_bytes())?;
        }
        let t = &self.config.train;
        let out_of_budget = self.state.epoch >= t.max_epochs;
        let stalled = self.state.bad_epochs >= t.patience;
        if t.v2s && self.state.rho && self.state.epoch >= t.min_stage1_epochs {
            self.vote(VotingOptions { force_rho: false, input_len: FLOPS_INPUT_LEN })?;
        } else if out_of_budget || stalled {
            let why = if stalled { "validation accuracy stalled" } else { "stage-1 epoch budget spent" };
            self.state.stop_reason = Some(if t.v2s {
                format!("{why} before the hidden units converged; no voting")
            } else {
                why.to_string()
            });
            self.record_unpruned()?;
            self.state.advance(Stage::Done)?;
        }
        self.save_last()
    }

    /// Voting epoch over the training set in fixed order, then the switch
    /// to stage 2 with a fresh optimizer.
    pub fn vote(&mut self, opts: VotingOptions) -> Result<PruneReport> {
        if !matches!(self.state.stage, Stage::Stage1 | Stage::Done) || self.state.voted {
            return Err(Error::Refused(format!(
                "voting needs a stage-1 run that has not voted (at {})",
                self.state.stage.name()
            )));
        }
        self.open_artifacts()?;
        self.record_unpruned()?;
        let batches: Vec<TokenBatch> = self.batches(Split::Train, None).into_iter().map(|b| b.batch).collect();
        let report = run_voting_epoch(&mut self.model, &batches, &self.state.units, &self.config.group, opts)?;
        self.state.advance(Stage::Voting)?;
        self.state.voted = true;
        self.state.forced = report.forced;
        self.state.advance(Stage::Stage2)?;
        self.state.epoch = 0;
        self.state.stage_step = 0;
        self.state.best_valid = None;
        self.state.bad_epochs = 0;
        self.state.stop_reason = None;
        self.optimizer = OptimizerState::new(self.config.train.adam());
        if let Some(p) = self.artifact("prune_report.toml") {
            report.save(&p)?;
        }
        if self.config.train.finetune_epochs == 0 {
            self.state.stop_reason = Some("pruned; no finetuning epochs".into());
            self.state.advance(Stage::Done)?;
        }
        Ok(report)
    }

    /// One task-loss-only epoch on the masked network.
    pub fn stage2_epoch(&mut self) -> Result<()> {
        if self.state.stage != Stage::Stage2 {
            return Err(Error::Refused(format!("not in stage 2 (at {})", self.state.stage.name())));
        }
        self.open_artifacts()?;
        let seed = self.config.train.seed;
        let batches = self.batches(Split::Train, Some(derive_seed(seed, &[SEED_SHUFFLE, 2, self.state.epoch])));
        for lb in &batches {
            self.train_step(lb, false)?;
        }
        self.state.epoch += 1;
        let valid = self.evaluate(Split::Valid)?;
        self.track_valid(valid.accuracy);
        let t = &self.config.train;
        if self.state.epoch >= t.finetune_epochs {
            self.state.stop_reason = Some("finetuning epoch budget spent".into());
            self.state.advance(Stage::Done)?;
        } else if self.state.bad_epochs >= t.patience {
            self.state.stop_reason = Some("finetuning validation accuracy stalled".into());
            self.state.advance(Stage::Done)?;
        }
        self.save_last()
    }

    /// Final evaluation and artifacts.
    pub fn finish(&mut self) -> Result<RunSummary> {
        self.open_artifacts()?;
        let eff = match self.model.mask() {
            Some(mask) => EfficiencyReport::of(
                &self.model.structural_prune(&mask.clone(), self.config.group.groups)?,
                FLOPS_INPUT_LEN,
            ),
            None => EfficiencyReport::of(&self.model, FLOPS_INPUT_LEN),
        };
        let summary = RunSummary {
            stage: self.state.stage,
            stop_reason: self.state.stop_reason.clone().unwrap_or_default(),
            steps: self.state.step,
            stage1_epochs: self.state.stage1_epochs,
            stage2_epochs: if self.state.voted { self.state.epoch } else { 0 },
            rho: self.state.rho,
            voted: self.state.voted,
            forced: self.state.forced,
            params: eff.non_embedding_params,
            flops: eff.flops,
            kept_heads: eff.heads_per_layer,
            valid: self.evaluate(Split::Valid)?,
            test: self.evaluate(Split::Test)?,
            unpruned_valid: self.state.unpruned_valid,
            unpruned_test: self.state.unpruned_test,
            compactness: self.state.compactness.clone(),
        };
        if let Some(p) = self.artifact("final.ckpt") {
            self.checkpoint()?.save(&p)?;
        }
        if let Some(p) = self.artifact("summary.toml") {
            write_atomic(&p, summary.to_toml()?.as_bytes())?;
        }
        Ok(summary)
    }

    /// Compactness of the current groups on the whole validation split,
    /// under the hidden units' latest assignment.
    pub fn measure_compactness(&self) -> Result<Option<CompactnessRecord>> {
        let valid = self.data.split(Split::Valid);
        if valid.is_empty() {
            return Ok(None);
        }
        let batch = make_batches(
            valid,
            valid.len(),
            self.config.model.architecture,
            self.data.max_src,
            self.data.max_tgt,
            None,
        )
        .remove(0);
        let (_, fms) = self.model.infer(&batch.batch)?;
        let g = &self.config.group;
        let primary = g.primary_kind();
        let mut measures = Vec::new();
        let mut names = Vec::new();
        for (s, site) in self.model.sites().iter().enumerate() {
            let Some(u) = self.state.units.site(s) else { continue };
            let layer = &fms.layers[s];
            let pooled: Vec<(f64, Vec<Vec<f64>>)> = g
                .active_kinds()
                .into_iter()
                .map(|(k, t)| Ok((t, pool_tensor(layer.get(k))?)))
                .collect::<Result<_>>()?;
            let combined = combine_points(&pooled)?;
            measures.push(SiteMeasure {
                points: pool_tensor(layer.get(primary))?,
                centroids: group_means(&combined, &u.labels, g.groups),
                labels: u.labels.clone(),
                pooled,
            });
            names.push(site.prefix());
        }
        if measures.is_empty() {
            return Ok(None);
        }
        Ok(Some(CompactnessRecord::new(&snapshot(self.state.step, primary, &measures), names)))
    }

    /// Pools every grouped site, refreshes hidden units and builds the group
    /// loss when it is active.
    fn group_step(
        &mut self,
        g: &mut Graph<f32>,
        bound: &BoundParams,
        captures: &[AttentionCapture],
        step: u64,
    ) -> Result<(Option<Var>, GroupRow)> {
        let cfg: GroupConfig = self.config.group.clone();
        let seed = self.config.train.seed;
        let active = cfg.active_kinds();
        let primary = cfg.primary_kind();
        let mut continuous = Vec::new();
        let mut categorical = Vec::new();
        let mut measures = Vec::new();
        for (s, site) in self.model.sites().iter().enumerate() {
            if !self.site_grouped(site) {
                continue;
            }
            let cap = captures[s];
            let kinds: Vec<(FmKind, Vec<Vec<f64>>)> =
                FmKind::ALL.iter().map(|&k| Ok((k, pool_tensor(g.value(cap.get(k)))?))).collect::<Result<_>>()?;
            let mut pooled_vars = Vec::with_capacity(active.len());
            for &(kind, tau) in &active {
                pooled_vars.push((tau, pool_var(g, cap.get(kind))?));
            }
            let combined = combine_vars(g, &pooled_vars)?;
            if self.state.units.site(s).is_none() || step % cfg.refresh_every == 0 {
                let points = rows(g.value(combined));
                let kseed = derive_seed(seed, &[SEED_KMEANS, step, s as u64]);
                self.state.units.refresh(s, &points, &kinds, &cfg, kseed)?;
            }
            let u = self.state.units.site(s).expect("refreshed above");
            let (labels, centroids) = (u.labels.clone(), u.centroids.clone());
            measures.push(SiteMeasure {
                points: kinds[primary.code() as usize].1.clone(),
                pooled: active.iter().map(|&(k, t)| (t, kinds[k.code() as usize].1.clone())).collect(),
                labels: labels.clone(),
                centroids: centroids.clone(),
            });
            if !cfg.is_active() {
                continue;
            }
            match cfg.variant {
                LossVariant::Continuous => {
                    continuous.push(ContinuousSite { pooled: pooled_vars, combined, labels, centroids })
                }
                LossVariant::Categorical => {
                    let prefix = site.prefix();
                    let w = bound.var(&format!("gct.{prefix}.w"))?;
                    let b = bound.var(&format!("gct.{prefix}.b"))?;
                    categorical.push((classifier_probs(g, combined, w, b)?, labels));
                }
            }
        }
        if measures.is_empty() {
            return Ok((None, GroupRow::undefined()));
        }
        let snap = snapshot(step, primary, &measures);
        let mut row = GroupRow {
            loss: 0.0,
            homogeneity: snap.homogeneity,
            diversity: snap.diversity,
            sc: snap.mean_sc(),
            di: snap.mean_di(),
        };
        if !cfg.is_active() {
            return Ok((None, row));
        }
        let terms = match cfg.variant {
            LossVariant::Continuous => {
                gct_loss_continuous(g, &continuous, cfg.groups, cfg.alpha, cfg.beta, cfg.centroid_grad)?
            }
            LossVariant::Categorical => gct_loss_categorical(g, &categorical, cfg.groups, cfg.alpha, cfg.beta)?,
        };
        row.loss = scalar(g.value(terms.loss));
        Ok((Some(terms.loss), row))
    }

    /// Forward, losses, backward, Adam and logging for one batch.
    fn train_step(&mut self, lb: &LabeledBatch, stage1: bool) -> Result<()> {
        let step = self.state.step;
        let t = self.config.train.clone();
        let mut g = Graph::<f32>::new();
        let bound = self.model.params.bind(&mut g, true);
        let mut dropout = DropoutStream::train(derive_seed(t.seed, &[SEED_DROPOUT, step]));
        let out = self.model.forward(&mut g, &bound, &lb.batch, &mut dropout)?;
        let ce = g.cross_entropy(out.logits, &lb.targets, t.label_smoothing, Some(PAD))?;
        let (group_loss, row) =
            if stage1 { self.group_step(&mut g, &bound, &out.captures, step)? } else { (None, GroupRow::undefined()) };
        let loss = match group_loss {
            Some(l) => g.add(ce, l)?,
            None => ce,
        };
        let schedule = if stage1 { t.schedule() } else { t.finetune_schedule() };
        let lr = schedule.lr(self.state.stage_step + 1);
        let loss_task = scalar(g.value(ce));
        if !scalar(g.value(loss)).is_finite() {
            return Err(self.abort(step, loss_task, row.loss, lr));
        }
        let mut grads = g.backward(loss)?;
        let grads = bound.collect_grads(&mut grads);
        adam_step(&mut self.model.params, &grads, &mut self.optimizer, lr)?;
        if step % t.log_every == 0 {
            let m = task_metrics(g.value(out.logits), &lb.targets, lb.batch.tgt_len)?;
            if let Some(log) = &mut self.log {
                log.append(&MetricsRow {
                    step,
                    loss_task,
                    loss_group: row.loss,
                    homogeneity: row.homogeneity,
                    diversity: row.diversity,
                    sc: row.sc,
                    di: row.di,
                    ppl: m.perplexity,
                    acc: m.accuracy,
                })?;
            }
        }
        self.state.step += 1;
        self.state.stage_step += 1;
        Ok(())
    }

    fn abort(&self, step: u64, loss_task: f64, loss_group: f64, lr: f64) -> Error {
        #[derive(Serialize)]
        struct Diagnostic<'a> {
            step: u64,
            stage: &'a str,
            loss_task: f64,
            loss_group: f64,
            lr: f64,
            param_digest: String,
        }
        let detail = format!("task loss {loss_task}, group loss {loss_group}, lr {lr}");
        if let Some(p) = self.artifact("diagnostic.toml") {
            let d = Diagnostic {
                step,
                stage: self.state.stage.name(),
                loss_task,
                loss_group,
                lr,
                param_digest: self.model.params.digest(),
            };
            if let Ok(text) = toml::to_string(&d) {
                // the abort error matters more than a failed snapshot write
                let _ = write_atomic(&p, text.as_bytes());
            }
        }
        Error::NonFinite { step, detail }
    }
}

/// Teacher-forced task metrics over prepared batches.
pub fn evaluate_model<T: Real>(model: &TransformerModel<T>, batches: &[LabeledBatch]) -> Result<TaskMetrics> {
    let mut tally = TaskTally::default();
    for lb in batches {
        let (logits, _) = model.infer(&lb.batch)?;
        tally.add(&logits, &lb.targets, lb.batch.tgt_len)?;
    }
    Ok(tally.finish())
}

/// Trains `config` from scratch into its output directory.
pub fn train(config: &RunConfig) -> Result<RunSummary> {
    let dir = config.train.output_dir.clone();
    Trainer::new(config.clone(), Some(dir))?.run()
}

/// Task-loss-only finetuning of a masked model until the stage machine
/// reaches `Done`.
pub fn finetune_after_prune(trainer: &mut Trainer) -> Result<RunSummary> {
    if trainer.model.mask().is_none() || trainer.state.stage != Stage::Stage2 {
        return Err(Error::Refused("finetuning needs a pruned run in stage 2".into()));
    }
    trainer.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::GroupConfig;

    #[test]
    fn stage_machine_rejects_skips() {
        let mut s = RunState::new(2);
        assert!(s.advance(Stage::Stage2).is_err());
        s.advance(Stage::Voting).unwrap();
        assert!(s.advance(Stage::Done).is_err());
        s.voted = true;
        s.advance(Stage::Stage2).unwrap();
        s.advance(Stage::Done).unwrap();
        assert!(s.advance(Stage::Voting).is_err());
        assert!(s.advance(Stage::Stage1).is_err());
    }

    #[test]
    fn run_state_round_trips_through_toml() {
        let mut s = RunState::new(3);
        let pts = vec![vec![1.0, 0.1], vec![0.9, 0.2], vec![0.0, 1.0], vec![0.1, 0.7]];
        let cfg = GroupConfig::default();
        s.units.refresh(1, &pts, &[(FmKind::Value, pts.clone()), (FmKind::Output, pts.clone())], &cfg, 3).unwrap();
        s.units.end_epoch();
        s.units.refresh(1, &pts, &[(FmKind::Value, pts.clone())], &cfg, 4).unwrap();
        s.units.end_epoch();
        s.best_valid = Some(0.123456789012345);
        s.compactness = Some(CompactnessRecord {
            step: 3,
            kind: FmKind::Value,
            sites: vec!["enc.0.self".into()],
            sc: vec![f64::NAN],
            di: vec![f64::INFINITY],
            mean_sc: f64::NAN,
            mean_di: f64::INFINITY,
            final_sc: f64::NAN,
            homogeneity: -0.9,
            diversity: 0.1,
        });
        let back = RunState::from_toml(&s.to_toml().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.units, s.units);
        assert_eq!(back.best_valid, s.best_valid);
        let c = back.compactness.unwrap();
        assert!(c.sc[0].is_nan() && c.di[0].is_infinite());
    }

    #[test]
    fn derived_seeds_differ_by_part() {
        let a = derive_seed(1, &[SEED_KMEANS, 0, 1]);
        assert_ne!(a, derive_seed(1, &[SEED_KMEANS, 1, 0]));
        assert_ne!(a, derive_seed(2, &[SEED_KMEANS, 0, 1]));
        assert_eq!(a, derive_seed(1, &[SEED_KMEANS, 0, 1]));
    }
}
