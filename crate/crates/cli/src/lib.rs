//! Experiment harness: dataset generation, training, evaluation against the
//! baselines, timing and threshold sweeps. Results are CSV files, each with
//! a `*.manifest.json` sidecar.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Environment variable overriding the number of worker threads.
pub const WORKERS_ENV: &str = "FDGNN_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "fdgnn",
    version,
    about = "GNN power allocation for full-duplex D2D networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat TOML config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `train.jsonl` and `test.jsonl` into the `--out` directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write a checkpoint to `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from `generate`; sampled from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Truncate training and validation graphs at this midpoint distance (m).
        #[arg(long)]
        truncate_t: Option<f64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare a checkpoint with WMMSE and greedy on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Time F-GNN inference against WMMSE for each `bench_links` size.
    BenchTime {
        #[command(flatten)]
        common: Common,
        /// Weights to time with; freshly initialized ones otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per threshold in `thresholds_m`.
    ThresholdSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Sizes the global worker pool from [`WORKERS_ENV`], if set.
pub fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("{WORKERS_ENV}={raw:?} is not a worker count"))?;
    anyhow::ensure!(n >= 1, "{WORKERS_ENV} must be at least 1");
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker pool")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => commands::generate(&common),
        Command::Train {
            common,
            data,
            truncate_t,
            resume,
        } => commands::train(&common, data.as_deref(), truncate_t, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => commands::eval(&common, &checkpoint, data.as_deref()),
        Command::BenchTime { common, checkpoint } => {
            commands::bench_time(&common, checkpoint.as_deref())
        }
        Command::ThresholdSweep { common, data } => {
            commands::threshold_sweep(&common, data.as_deref())
        }
    }
}
