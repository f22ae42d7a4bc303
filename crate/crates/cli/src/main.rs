//! Operator entry point: simulate, train, stream, eval, sensitivity, export.
//!
//! Every command is a pure function of (config file, input files, seed):
//! re-running with the same inputs reproduces the same output files.
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod config;
mod report;

use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

/// Configuration problem (bad file, bad values); exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(
    name = "dpvae",
    about = "Incremental clustering and online anomaly detection on transmissibility features",
    version
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint path (stream/eval).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the shear-building transmissibility dataset.
    Simulate,
    /// Train on a dataset (optionally class-incremental / repeated).
    Train,
    /// Ingest new data batches into an existing checkpoint.
    Stream {
        /// Dataset stems of the batches, in arrival order.
        batches: Vec<PathBuf>,
    },
    /// Score a labeled dataset against a checkpoint.
    Eval {
        /// Dataset stem to evaluate.
        dataset: PathBuf,
    },
    /// Sweep the concentration parameter.
    Sensitivity {
        /// Comma-separated concentration values (defaults to the config).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Export a dataset as CSV.
    Export {
        /// Dataset stem to export.
        dataset: PathBuf,
        /// Output CSV path (defaults to `<out>/dataset.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(ConfigError)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.engine.rng_seed = seed;
    } else if cli.config.is_some() {
        // keep engine seed in sync with the master seed unless set apart
        if cfg.engine.rng_seed == dpvae::engine::EngineConfig::default().rng_seed {
            cfg.engine.rng_seed = cfg.seed;
        }
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Simulate => commands::cmd_simulate(&cfg),
        Cmd::Train => commands::cmd_train(&cfg),
        Cmd::Stream { batches } => {
            let ckpt = cli
                .checkpoint
                .clone()
                .ok_or_else(|| ConfigError("--checkpoint is required for stream".into()))?;
            if batches.is_empty() {
                println!("no batches supplied; nothing to do");
                return Ok(());
            }
            commands::cmd_stream(&cfg, &ckpt, batches)
        }
        Cmd::Eval { dataset } => {
            let ckpt = cli
                .checkpoint
                .clone()
                .ok_or_else(|| ConfigError("--checkpoint is required for eval".into()))?;
            commands::cmd_eval(&cfg, &ckpt, dataset)
        }
        Cmd::Sensitivity { alphas } => {
            let list = alphas.clone().unwrap_or_else(|| cfg.alphas.clone());
            if list.iter().any(|&a| !(a > 0.0)) {
                return Err(ConfigError("alphas must be positive".into()).into());
            }
            commands::cmd_sensitivity(&cfg, &list)
        }
        Cmd::Export { dataset, output } => {
            let out = output.clone().unwrap_or_else(|| cfg.out_dir.join("dataset.csv"));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            commands::cmd_export(dataset, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if let Some(core) = err.downcast_ref::<dpvae::Error>() {
        use dpvae::Error::*;
        return match core {
            Domain(_) => 2,
            Io(_) | Format(_) | ChecksumMismatch | VersionMismatch { .. } | EmptyDataset
            | ShapeMismatch(_) | BandEmpty(_) => 3,
            _ => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    3
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}
