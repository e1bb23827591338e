//! Run configuration, toy tasks, the staged training driver, sweeps,
//! reports and checkpoint inspection.

pub mod config;
pub mod inspect;
pub mod report;
pub mod sweep;
pub mod tasks;
pub mod trainer;

pub use config::{apply_override, RunConfig, TrainConfig};
pub use inspect::{eval_checkpoint, inspect_checkpoint, parse_split, EvalReport, Inspection, SiteInspection};
pub use report::{group_series, report, trend, RunReport, SeriesPoint, Trend};
pub use sweep::{sweep, SweepAxis, SweepCell, SweepReport};
pub use tasks::*;
pub use trainer::{
    derive_seed, evaluate_model, finetune_after_prune, train, CompactnessRecord, RunState, RunSummary, Stage, Trainer,
    FLOPS_INPUT_LEN,
};
