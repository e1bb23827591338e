//! Run-level guarantees of the trainer: reproducibility, resumption and the
//! degenerate settings of the group loss.

use std::path::Path;

use gha_core::harness::{RunConfig, Stage, Trainer};
use gha_core::v2s::VotingOptions;

fn tiny(overrides: &[&str]) -> RunConfig {
    let mut o: Vec<String> = ["task.samples=200", "train.v2s=false", "train.max_epochs=10"].map(String::from).to_vec();
    o.extend(overrides.iter().map(|s| s.to_string()));
    RunConfig::preset("tiny", &o).unwrap()
}

fn trainer(cfg: RunConfig, dir: &Path) -> Trainer {
    Trainer::new(cfg, Some(dir.to_path_buf())).unwrap()
}

fn same_file(a: &Path, b: &Path, name: &str) {
    let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    assert!(x == y, "{name} differs");
}

fn forced() -> VotingOptions {
    VotingOptions { force_rho: true, ..VotingOptions::default() }
}

/// Two stage-1 epochs, a forced vote and two finetuning epochs.
fn full_schedule(t: &mut Trainer) {
    t.stage1_epoch().unwrap();
    t.stage1_epoch().unwrap();
    t.vote(forced()).unwrap();
    t.stage2_epoch().unwrap();
    t.stage2_epoch().unwrap();
    assert_eq!(t.state.stage, Stage::Done);
    t.finish().unwrap();
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(&["train.max_epochs=2"]);
    trainer(cfg.clone(), a.path()).run().unwrap();
    trainer(cfg, b.path()).run().unwrap();
    for f in ["metrics.csv", "final.ckpt", "summary.toml"] {
        same_file(a.path(), b.path(), f);
    }
}

#[test]
fn resume_in_stage_one_matches_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(&["train.max_epochs=3"]);
    trainer(cfg.clone(), a.path()).run().unwrap();

    let mut t = trainer(cfg, b.path());
    t.stage1_epoch().unwrap();
    drop(t);
    Trainer::resume(&b.path().join("last.ckpt"), None).unwrap().run().unwrap();

    same_file(a.path(), b.path(), "metrics.csv");
    same_file(a.path(), b.path(), "final.ckpt");
}

#[test]
fn resume_in_stage_two_matches_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(&["train.finetune_epochs=2"]);
    full_schedule(&mut trainer(cfg.clone(), a.path()));

    let mut t = trainer(cfg, b.path());
    t.stage1_epoch().unwrap();
    t.stage1_epoch().unwrap();
    t.vote(forced()).unwrap();
    t.stage2_epoch().unwrap();
    drop(t);
    let mut t = Trainer::resume(&b.path().join("last.ckpt"), None).unwrap();
    assert_eq!(t.state.stage, Stage::Stage2);
    t.run().unwrap();

    same_file(a.path(), b.path(), "metrics.csv");
    same_file(a.path(), b.path(), "final.ckpt");
    same_file(a.path(), b.path(), "prune_report.toml");
}

#[test]
fn zero_finetune_epochs_leave_the_voted_model_untouched() {
    let mut t = Trainer::new(tiny(&["train.finetune_epochs=0"]), None).unwrap();
    t.stage1_epoch().unwrap();
    let before = t.model.params.digest();
    t.vote(forced()).unwrap();
    assert_eq!(t.state.stage, Stage::Done);
    let summary = t.run().unwrap();
    assert_eq!(summary.stage2_epochs, 0);
    assert_eq!(t.model.params.digest(), before);
    assert!(t.model.mask().is_some());
}

#[test]
fn zero_group_weights_train_like_plain_task_loss() {
    let grouped = ["group.alpha=0", "group.beta=0"];
    let ungrouped = ["group.encoder_self=false", "group.decoder_self=false", "group.cross=false"];
    let digest = |o: &[&str]| {
        let mut t = Trainer::new(tiny(o), None).unwrap();
        t.stage1_epoch().unwrap();
        t.model.params.digest()
    };
    assert_eq!(digest(&grouped), digest(&ungrouped));
    // A live group loss does change the trajectory.
    assert_ne!(digest(&["group.alpha=0.5"]), digest(&ungrouped));
}
