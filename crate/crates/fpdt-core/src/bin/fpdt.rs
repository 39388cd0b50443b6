//! Command-line driver: dataset generation, federated training, evaluation,
//! and sweeps, all from one TOML config.
//!
//! Exit codes: 0 success, 2 usage/config problems, 3 data or checkpoint
//! integrity problems.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use fpdt_core::config::AppConfig;
use fpdt_core::error::{Error, Result};
use fpdt_core::eval::SweepAxis;
use fpdt_core::pipeline;

#[derive(Parser)]
#[command(name = "fpdt", version, about = "MEC VR resource-allocation simulator and federated prompt-based decision-transformer trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; keys can be overridden with FPDT_* env vars.
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output/run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out behavior policies and write per-server dataset shards.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the model with federated averaging over dataset shards.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding shards + manifest from gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out environments.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file produced by train.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate across a parameter grid, everything else held fixed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of: qoe_th, hfqoe_th, bandwidth, frequency, rtg, prompt_len.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values; defaults to the axis's standard grid.
        #[arg(long)]
        grid: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<AppConfig> {
    let mut cfg = AppConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad grid value {s:?}: {e}")))
        })
        .collect()
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let manifest = pipeline::gen_data(&cfg, &common.out)?;
            println!(
                "wrote {} shard(s), {} training env instances, {} held-out envs -> {}",
                manifest.shards.len(),
                manifest.train_env_count,
                manifest.holdout.len(),
                common.out.display()
            );
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let art = pipeline::train(&cfg, &data, &common.out)?;
            println!(
                "trained {} round(s); final checkpoint {}",
                art.rounds_run,
                art.final_checkpoint.display()
            );
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            let summary = pipeline::evaluate(&cfg, &checkpoint, &data, &common.out)?;
            println!(
                "evaluated {} episode(s): MA {:.4} ({:.4}), EP {:.2} ({:.2}), min QoE {:.4} ({:.4})",
                summary.episodes.len(),
                summary.ma_mean,
                summary.ma_std,
                summary.ep_mean,
                summary.ep_std,
                summary.min_qoe_mean,
                summary.min_qoe_std
            );
        }
        Command::Sweep { common, data, checkpoint, axis, grid } => {
            let cfg = load_config(&common)?;
            let axis: SweepAxis = axis.parse()?;
            let grid = match grid {
                Some(text) => parse_grid(&text)?,
                None => axis.default_grid(),
            };
            let rows = pipeline::run_sweep(&cfg, &checkpoint, &data, &common.out, axis, &grid)?;
            println!("swept {} grid point(s), {} rows", grid.len(), rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
