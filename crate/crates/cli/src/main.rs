//! `vesselseg`: synthetic data, weak labels, training, evaluation and reports.
//!
//! Exit codes: 0 success, 2 configuration or usage, 3 data or I/O,
//! 4 numerical failure (non-finite loss or parameters).

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vesselseg::config::ExperimentConfig;
use vesselseg::synthgen::Split;
use vesselseg::trainer::Ablation;
use vesselseg::{Error, Result};

#[derive(Parser)]
#[command(name = "vesselseg", version, about = "Semi-supervised vessel segmentation on synthetic pathology patches")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr_seg=3e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of labelled patches.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Drop a loss term: no_self_sup, no_os_d, no_us_d or no_discriminators.
    #[arg(long, global = true, value_name = "FLAG")]
    pub ablation: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Output directory (defaults depend on the command).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Default location for corpora and runs.
    #[arg(long, global = true, env = "VESSELSEG_RUN_ROOT", default_value = "runs", value_name = "DIR")]
    pub run_root: PathBuf,
}

impl Common {
    /// Config file, then `--set`, then the dedicated flags.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(k) = self.k {
            overrides.push(format!("data.labeled={k}"));
            overrides.push(format!("train.k={k}"));
        }
        for flag in &self.ablation {
            Ablation::default().set(flag)?;
            if flag != "none" {
                overrides.push(format!("train.ablation.{flag}=true"));
            }
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }

    pub fn corpus_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.run_root.join("corpus"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData,
    /// Draw the over- and under-segmented weak-label sets for a corpus.
    WeakLabels {
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
    },
    /// Train a segmenter.
    Train {
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Compute metrics of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        target: Target,
        /// Evaluate only the first N patches.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write binary mask PNGs for a split.
    Predict {
        #[command(flatten)]
        target: Target,
    },
    /// Render training curves, a sample grid and a metrics table.
    Report {
        #[command(flatten)]
        target: Target,
        /// Patches per row group in the grid.
        #[arg(long, default_value_t = 4)]
        rows: usize,
    },
}

#[derive(Args, Clone, Debug)]
pub struct Target {
    /// Run directory produced by `train`.
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// Checkpoint file (defaults to the run's best checkpoint).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let summary = match &cli.command {
        Command::GenData => commands::gen_data(c)?,
        Command::WeakLabels { corpus } => commands::weak_labels(c, &c.corpus_dir(corpus))?,
        Command::Train { corpus, resume } => commands::train(c, &c.corpus_dir(corpus), *resume)?,
        Command::Eval { target, limit } => commands::eval(c, target, *limit)?,
        Command::Predict { target } => commands::predict(c, target)?,
        Command::Report { target, rows } => commands::report(c, target, *rows)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
