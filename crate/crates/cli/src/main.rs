//! `gha`: train, prune, finetune and inspect grouped head attention runs.
//!
//! Results go to stdout as TOML (or markdown for `report`). Failures print a
//! single line to stderr,
//!
//! ```text
//! error kind=<kind> code=<n> message="<text>"
//! ```
//!
//! and exit with the code listed in [`ExitKind`].

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use gha_core::harness::{
    eval_checkpoint, finetune_after_prune, inspect_checkpoint, parse_split, report, sweep, RunConfig, SweepAxis,
    Trainer, FLOPS_INPUT_LEN,
};
use gha_core::v2s::VotingOptions;
use gha_core::Error;

/// Overrides the output directory of every command that writes artifacts.
const OUTPUT_DIR_ENV: &str = "GHA_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "gha", version, about = "Grouped head attention laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run config. Without it the `tiny` preset defaults apply.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Config override, e.g. `group.alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config, or continue from a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue the run stored in this checkpoint.
        #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "set"])]
        resume: Option<PathBuf>,
    },
    /// Run the voting epoch on a stage-1 checkpoint and write `pruned.ckpt`.
    Prune {
        checkpoint: PathBuf,
        /// Vote even if the hidden units have not converged.
        #[arg(long)]
        force_rho: bool,
    },
    /// Finetune a pruned checkpoint to the end of stage 2.
    Finetune { checkpoint: PathBuf },
    /// Task metrics and head counts of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train one run per cell of a parameter axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
        betas: Vec<f64>,
    },
    /// Summary tables and the homogeneity/diversity series of a run directory.
    Report { dir: PathBuf },
    /// Hidden units, centroids and pattern scores stored in a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        /// Also write the first training batch's feature maps here.
        #[arg(long, value_name = "PATH")]
        dump: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    AlphaBetaGrid,
    GroupCount,
}

/// Exit codes. Documented in the README; keep the two in sync.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ExitKind {
    Other = 1,
    Usage = 2,
    Config = 3,
    UnknownKey = 4,
    Malformed = 5,
    NotFound = 6,
    Refused = 7,
    NonFinite = 8,
    Io = 9,
}

impl ExitKind {
    fn name(self) -> &'static str {
        match self {
            ExitKind::Other => "other",
            ExitKind::Usage => "usage",
            ExitKind::Config => "config",
            ExitKind::UnknownKey => "unknown-key",
            ExitKind::Malformed => "malformed",
            ExitKind::NotFound => "not-found",
            ExitKind::Refused => "refused",
            ExitKind::NonFinite => "non-finite",
            ExitKind::Io => "io",
        }
    }

    fn of(err: &anyhow::Error) -> Self {
        let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
            return ExitKind::Other;
        };
        match e {
            Error::Config { .. } => ExitKind::Config,
            Error::UnknownKey(_) => ExitKind::UnknownKey,
            Error::Malformed { .. } | Error::Csv(_) => ExitKind::Malformed,
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => ExitKind::NotFound,
            Error::Io { .. } => ExitKind::Io,
            Error::Refused(_) => ExitKind::Refused,
            Error::NonFinite { .. } => ExitKind::NonFinite,
            _ => ExitKind::Other,
        }
    }
}

fn fail(kind: ExitKind, message: &str) -> ExitCode {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={} code={} message={:?}", kind.name(), kind as u8, line);
    ExitCode::from(kind as u8)
}

/// Joins the context chain, skipping causes already quoted by their parent.
fn chain_message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain().map(|c| c.to_string()) {
        if out.ends_with(&cause) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&cause);
    }
    out
}

fn env_output_dir() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p, &args.set)?,
        None => RunConfig::preset("tiny", &args.set)?,
    };
    let explicit = args.set.iter().any(|s| s.trim_start().starts_with("train.output_dir"));
    if let (Some(dir), false) = (env_output_dir(), explicit) {
        cfg.train.output_dir = dir;
    }
    Ok(cfg)
}

fn print_toml<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    print!("{}", toml::to_string(value).context("serializing output")?);
    Ok(())
}

fn resume(ckpt: &Path) -> anyhow::Result<Trainer> {
    Trainer::resume(ckpt, env_output_dir()).with_context(|| format!("loading {}", ckpt.display()))
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { cfg, resume: from } => {
            let summary = match from {
                Some(ckpt) => resume(&ckpt)?.run()?,
                None => {
                    let config = load_config(&cfg)?;
                    let dir = config.train.output_dir.clone();
                    Trainer::new(config, Some(dir))?.run()?
                }
            };
            print_toml(&summary)
        }
        Command::Prune { checkpoint, force_rho } => {
            let mut t = resume(&checkpoint)?;
            let report = t.vote(VotingOptions { force_rho, input_len: FLOPS_INPUT_LEN })?;
            if report.forced {
                eprintln!("warning: voting forced before the hidden units converged; this run does not conform");
            }
            let dir = t.out_dir().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            t.checkpoint()?.save(&dir.join("pruned.ckpt"))?;
            print_toml(&report)
        }
        Command::Finetune { checkpoint } => {
            let mut t = resume(&checkpoint)?;
            print_toml(&finetune_after_prune(&mut t)?)
        }
        Command::Eval { checkpoint, split } => print_toml(&eval_checkpoint(&checkpoint, parse_split(&split)?)?),
        Command::Sweep { cfg, axis, alphas, betas } => {
            let config = load_config(&cfg)?;
            let axis = match axis {
                AxisArg::AlphaBetaGrid => SweepAxis::AlphaBetaGrid { alphas, betas },
                AxisArg::GroupCount => SweepAxis::GroupCount,
            };
            let dir = config.train.output_dir.clone();
            print_toml(&sweep(&config, &axis, Some(&dir))?)
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?.text);
            Ok(())
        }
        Command::Inspect { checkpoint, dump } => print_toml(&inspect_checkpoint(&checkpoint, dump.as_deref())?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(ExitKind::Usage, &e.to_string().replace("error: ", "")),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(ExitKind::of(&e), &chain_message(&e)),
    }
}
