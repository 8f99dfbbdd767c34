//! `biocast`: build batches, fit normalization statistics, train, fine-tune,
//! roll out and evaluate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod config;
mod data;
mod error;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::Ctx;
use error::CliError;
use logging::{Bridge, Logger};

#[derive(Parser, Debug)]
#[command(name = "biocast", version, about = "Multimodal Earth-system forecaster: data, training and evaluation")]
struct Cli {
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set optim.base_lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Keep logs off stderr (log files are still written).
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assemble one batch container per window from the configured sources.
    BuildBatches {
        /// Directories searched for relative source paths, in order.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalization statistics over a batch directory.
    ComputeStats {
        #[arg(long)]
        batches: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rollout fine-tuning of a trained checkpoint.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Autoregressive forecast from the two states of a seed batch.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "seed-batch")]
        seed_batch: PathBuf,
        /// Number of steps; defaults to `rollout.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trajectory against true states.
    Evaluate {
        #[arg(long)]
        trajectory: PathBuf,
        /// Batch directory holding the true states.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Comma-separated subset of: scorecard, mae, rmse, r2, f1, sorensen, richness.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; exit 4 if any suite fails.
    Gradcheck {
        /// Run only these suites: cross_attention, swin_stage, td_loss, ft_loss_k2.
        #[arg(long = "suite")]
        suites: Vec<String>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildBatches { .. } => "build-batches",
            Command::ComputeStats { .. } => "compute-stats",
            Command::Train { .. } => "train",
            Command::Finetune { .. } => "finetune",
            Command::Rollout { .. } => "rollout",
            Command::Evaluate { .. } => "evaluate",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn run(cli: Cli, log: &'static Logger) -> Result<(), CliError> {
    let loaded = config::load(cli.config.as_deref(), &cli.overrides)?;
    let ctx = Ctx { loaded, log };
    let name = cli.command.name();
    log.info("start", json!({ "command": name, "config": ctx.loaded.config.to_toml() }));
    match cli.command {
        Command::BuildBatches { inputs, out } => {
            commands::build::run(&ctx, &inputs, out)?;
        }
        Command::ComputeStats { batches, out } => {
            commands::stats::run(&ctx, batches, out)?;
        }
        Command::Train { out } => {
            commands::train::train(&ctx, out)?;
        }
        Command::Finetune { base, out } => {
            commands::train::finetune(&ctx, &base, out)?;
        }
        Command::Rollout { checkpoint, seed_batch, steps, stats, out } => {
            commands::rollout::run(&ctx, &checkpoint, &seed_batch, steps, stats, out)?;
        }
        Command::Evaluate { trajectory, truth, metrics, out } => {
            commands::evaluate::run(&ctx, &trajectory, truth, metrics, out)?;
        }
        Command::Gradcheck { suites, tolerance, out } => {
            commands::gradcheck::run(&ctx, &suites, tolerance, out)?;
        }
    }
    log.info("done", json!({ "command": name }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log: &'static Logger = Box::leak(Box::new(Logger::new(cli.quiet)));
    if log::set_logger(Box::leak(Box::new(Bridge(log)))).is_ok() {
        log::set_max_level(log::LevelFilter::Warn);
    }
    match run(cli, log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log.event("error", "failed", json!({ "kind": e.kind(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
