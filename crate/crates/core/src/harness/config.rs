//! Run configuration: `[model]`, `[group]`, `[train]` and `[task]` tables in
//! TOML, with `section.key=value` overrides.
//!
//! `model.preset` (`tiny`, `small`, `paper-base`) supplies defaults for every
//! other `model.*` key; explicitly given keys win. `model.vocab` is derived
//! from the task and may be omitted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::tasks::TaskSpec;
use crate::error::{Error, Result};
use crate::grouping::GroupConfig;
use crate::model::ModelConfig;
use crate::numerics::{AdamConfig, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Stage-1 epoch budget.
    pub max_epochs: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Metrics row every this many steps.
    pub log_every: u64,
    /// Run voting-to-stay once hidden units converge. Without it the run is
    /// plain group-constrained training.
    pub v2s: bool,
    /// Earliest stage-1 epoch count after which voting may start.
    pub min_stage1_epochs: u64,
    pub finetune_epochs: u64,
    pub finetune_warmup: u64,
    pub output_dir: PathBuf,
    /// Write a checkpoint at the end of every epoch.
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            lr: 1e-3,
            warmup_steps: 200,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.0,
            log_every: 10,
            v2s: true,
            min_stage1_epochs: 2,
            finetune_epochs: 10,
            finetune_warmup: 50,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.warmup_steps, self.lr)
    }

    pub fn finetune_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.finetune_warmup, self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing", "must lie in [0, 1)"));
        }
        for (f, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::config("train.weight_decay", "decay and clip must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset the model section was resolved from, kept for the record.
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub group: GroupConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
}

const SECTIONS: [&str; 4] = ["model", "group", "train", "task"];

/// Parses a `--set` value: TOML literal when it parses, bare string otherwise.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` to a raw document table.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like section.key=value"))?;
    let key = key.trim();
    let (section, field) = key.split_once('.').ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    if !SECTIONS.contains(&section) || field.is_empty() || field.contains('.') {
        return Err(Error::UnknownKey(key.to_string()));
    }
    let table = doc.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(table) = table else {
        return Err(Error::config(section, "must be a table"));
    };
    table.insert(field.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn known_keys<S: Serialize>(defaults: &S) -> Vec<String> {
    match Value::try_from(defaults) {
        Ok(Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Rejects keys no section defines, naming the first offender.
fn check_keys(doc: &Table) -> Result<()> {
    let model_keys: Vec<String> =
        known_keys(&ModelConfig::tiny(1)).into_iter().chain(["preset".to_string(), "vocab".to_string()]).collect();
    let mut group_keys = known_keys(&GroupConfig::default());
    group_keys.push("fm".into());
    let train_keys = known_keys(&TrainConfig::default());
    let task_keys = known_keys(&TaskSpec::default()).into_iter().chain(["corpus".to_string()]).collect::<Vec<_>>();
    for (section, value) in doc {
        let allowed = match section.as_str() {
            "model" => &model_keys,
            "group" => &group_keys,
            "train" => &train_keys,
            "task" => &task_keys,
            _ => return Err(Error::UnknownKey(section.clone())),
        };
        let Value::Table(t) = value else {
            return Err(Error::config(section.clone(), "must be a table"));
        };
        for k in t.keys() {
            if !allowed.contains(k) {
                return Err(Error::UnknownKey(format!("{section}.{k}")));
            }
        }
    }
    Ok(())
}

fn section<T: for<'de> Deserialize<'de>>(doc: &Table, name: &str) -> Result<T> {
    let t = doc.get(name).cloned().unwrap_or_else(|| Value::Table(Table::new()));
    t.try_into().map_err(|e: toml::de::Error| Error::config(name, e.message().to_string()))
}

impl RunConfig {
    /// Builds and validates a config from a raw document plus overrides.
    pub fn from_table(mut doc: Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        check_keys(&doc)?;
        let task: TaskSpec = section(&doc, "task")?;
        let mut group_doc = doc.get("group").cloned().unwrap_or_else(|| Value::Table(Table::new()));
        if let Value::Table(g) = &mut group_doc {
            if let Some(fm) = g.remove("fm") {
                let kind = fm
                    .as_str()
                    .and_then(|s| s.parse::<crate::model::FmKind>().ok())
                    .ok_or_else(|| Error::config("group.fm", "expected value, attention or output"))?;
                let mut tau = [0.0; 3];
                tau[kind.code() as usize] = 1.0;
                g.insert("tau".into(), Value::try_from(tau).expect("array"));
            }
        }
        let group: GroupConfig =
            group_doc.try_into().map_err(|e: toml::de::Error| Error::config("group", e.message().to_string()))?;
        let train: TrainConfig = section(&doc, "train")?;

        let mut model_table = match doc.get("model") {
            Some(Value::Table(t)) => t.clone(),
            _ => Table::new(),
        };
        let preset = match model_table.remove("preset") {
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(Error::config("model.preset", "must be a string")),
            None => None,
        };
        let base = ModelConfig::preset(preset.as_deref().unwrap_or("tiny"), 1)?;
        let mut merged = match Value::try_from(&base) {
            Ok(Value::Table(t)) => t,
            _ => return Err(Error::contract("model preset did not serialize to a table")),
        };
        let explicit_vocab = model_table.contains_key("vocab");
        for (k, v) in model_table {
            merged.insert(k, v);
        }
        let mut model: ModelConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("model", e.message().to_string()))?;
        if !explicit_vocab || model.vocab <= 1 {
            model.vocab = 0;
        }
        let cfg = RunConfig { preset: Some(preset.unwrap_or_else(|| "tiny".into())), model, group, train, task };
        cfg.validate_static()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, origin: &Path, overrides: &[String]) -> Result<Self> {
        let doc: Table =
            text.parse().map_err(|e: toml::de::Error| Error::malformed(origin, e.message().to_string()))?;
        Self::from_table(doc, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path, overrides)
    }

    /// Default config for a named preset with overrides applied.
    pub fn preset(name: &str, overrides: &[String]) -> Result<Self> {
        let mut doc = Table::new();
        let mut model = Table::new();
        model.insert("preset".into(), Value::String(name.into()));
        doc.insert("model".into(), Value::Table(model));
        Self::from_table(doc, overrides)
    }

    /// Checks everything that does not depend on generated data.
    pub fn validate_static(&self) -> Result<()> {
        self.group.validate(self.model.heads)?;
        self.train.validate()?;
        self.task.validate()?;
        let probe = ModelConfig { vocab: self.model.vocab.max(1), ..self.model.clone() };
        probe.validate()
    }

    /// Serialized form that reproduces this run. The model section is fully
    /// expanded.
    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            model: Table,
            group: &'a GroupConfig,
            train: &'a TrainConfig,
            task: &'a TaskSpec,
        }
        let mut model = match Value::try_from(&self.model) {
            Ok(Value::Table(t)) => t,
            _ => return Err(Error::contract("model config did not serialize to a table")),
        };
        if let Some(p) = &self.preset {
            model.insert("preset".into(), Value::String(p.clone()));
        }
        if self.model.vocab == 0 {
            model.remove("vocab");
        }
        toml::to_string(&Doc { model, group: &self.group, train: &self.train, task: &self.task })
            .map_err(|e| Error::contract(format!("serializing run config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::LossVariant;

    #[test]
    fn override_changes_only_that_key() {
        let base = RunConfig::preset("tiny", &[]).unwrap();
        let c = RunConfig::preset("tiny", &["group.alpha=0.25".into()]).unwrap();
        assert_eq!(c.group.alpha, 0.25);
        assert_eq!(c.group.beta, base.group.beta);
        assert_eq!(c.model, base.model);
        assert_eq!(c.train, base.train);
    }

    #[test]
    fn enum_and_array_overrides() {
        let c = RunConfig::preset(
            "tiny",
            &["group.variant=categorical".into(), "group.tau=[0.5, 0.0, 0.5]".into(), "task.kind=reverse".into()],
        )
        .unwrap();
        assert_eq!(c.group.variant, LossVariant::Categorical);
        assert_eq!(c.group.tau, [0.5, 0.0, 0.5]);
        let c = RunConfig::preset("tiny", &["group.fm=output".into()]).unwrap();
        assert_eq!(c.group.tau, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn unknown_keys_are_named() {
        for bad in ["group.alpah=1", "nosuch.key=1", "train=3"] {
            match RunConfig::preset("tiny", &[bad.into()]) {
                Err(Error::UnknownKey(_)) | Err(Error::Config { .. }) => {}
                other => panic!("{bad}: {other:?}"),
            }
        }
        assert!(matches!(
            RunConfig::preset("tiny", &["group.alpah=1".into()]),
            Err(Error::UnknownKey(k)) if k == "group.alpah"
        ));
    }

    #[test]
    fn invalid_values_name_the_field() {
        match RunConfig::preset("tiny", &["group.groups=9".into()]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "group.groups"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preset_fields_can_be_overridden() {
        let c = RunConfig::preset("small", &["model.d_ff=100".into()]).unwrap();
        assert_eq!(c.model.layers, 4);
        assert_eq!(c.model.d_ff, 100);
    }

    #[test]
    fn serialized_config_round_trips() {
        let c = RunConfig::preset("tiny", &["train.seed=7".into(), "group.beta=0.1".into()]).unwrap();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text, Path::new("mem"), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_file() {
        assert!(matches!(RunConfig::from_toml_str("[model\n", Path::new("x.toml"), &[]), Err(Error::Malformed { .. })));
    }
}
