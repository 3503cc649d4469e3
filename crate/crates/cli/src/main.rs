//! `cnnic` — train and evaluate the patch-ensemble CNN classifier.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cnnic::error::Result;
use config::{Precision, RunConfig};

#[derive(Parser)]
#[command(
    name = "cnnic",
    version,
    about = "Weight-shared small-CNN ensemble over strided image patches",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Key=value run configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for metrics, checkpoints and reports.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Numeric precision: train (f32) or verify (f64).
    #[arg(long, value_name = "train|verify")]
    precision: Option<String>,
    /// Use only the first N training images.
    #[arg(long, value_name = "N")]
    subset: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.csv and checkpoint.bin to the output
    /// directory.
    Train(Common),
    /// Evaluate a checkpoint on the train and test splits and report the
    /// overfitting index in both sign conventions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint produced by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Print the exact per-layer parameter counts for a configuration.
    CountParams(Common),
    /// Check tape gradients against central finite differences.
    Gradcheck(Common),
    /// Quadratic-loss ambiguity decomposition over the per-position,
    /// per-kernel ensemble members of a checkpoint.
    Ambiguity {
        #[command(flatten)]
        common: Common,
        /// Checkpoint produced by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut rc = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        rc.seed = seed;
    }
    if let Some(out) = &common.out {
        rc.out_dir = out.clone();
    }
    if let Some(precision) = &common.precision {
        rc.precision = Precision::parse(precision)?;
    }
    if let Some(subset) = common.subset {
        rc.subset = Some(subset);
    }
    Ok(rc)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(common) => {
            let rc = load_run_config(common)?;
            match rc.precision {
                Precision::Train => commands::run_train::<f32>(&rc),
                Precision::Verify => commands::run_train::<f64>(&rc),
            }
        }
        Cmd::Eval { common, checkpoint } => {
            let rc = load_run_config(common)?;
            let container = commands::load_container(checkpoint)?;
            // The checkpoint's stored element width decides the precision.
            match container.dtype()? {
                4 => commands::run_eval::<f32>(&container, &rc),
                _ => commands::run_eval::<f64>(&container, &rc),
            }
        }
        Cmd::CountParams(common) => {
            let rc = load_run_config(common)?;
            commands::run_count_params(&rc)
        }
        Cmd::Gradcheck(common) => {
            let rc = load_run_config(common)?;
            if rc.precision == Precision::Train {
                println!("note: gradient checks always run at verification precision (f64)");
            }
            commands::run_gradcheck(&rc, rc.seed)
        }
        Cmd::Ambiguity { common, checkpoint } => {
            let rc = load_run_config(common)?;
            let container = commands::load_container(checkpoint)?;
            match container.dtype()? {
                4 => commands::run_ambiguity::<f32>(&container, &rc),
                _ => commands::run_ambiguity::<f64>(&container, &rc),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
