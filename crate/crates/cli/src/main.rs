//! `modalvgae`: dataset generation, training, evaluation and robustness studies.

mod commands;
mod config;
mod plot;
mod reports;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "modalvgae", version, about = "Modal identification of trusses from response spectra")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file layered over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `train.lr_head=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for the command's random stream (generation, training or UQ sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Mark the run as deterministic in its record. Reductions are always
    /// fixed-order, so equal seeds give identical logs either way.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Skip SVG output; reports and CSV files are unchanged.
    #[arg(long, global = true)]
    pub no_plots: bool,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Best,
    Final,
}

impl Which {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Best => "best",
            Self::Final => "final",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize trusses, simulate responses and write a dataset directory.
    Generate {
        /// Number of trusses.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
    /// Train a model on a dataset and write checkpoints and metric logs.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Train the non-evidential baseline instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a checkpoint on one split: reports, calibration and plots.
    Eval {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: Which,
    },
    /// Write per-sample predictions with confidence intervals.
    Predict {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: Which,
        /// Restrict to these sample ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u32>,
    },
    /// Evaluate models on test samples re-simulated with measurement noise.
    StudyNoise {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// `NAME=RUN_DIR`, repeatable.
        #[arg(long = "model", required = true, value_name = "NAME=DIR")]
        models: Vec<String>,
        /// Noise levels, e.g. `clean,30,20,10` (default from `eval.snr`).
        #[arg(long, value_delimiter = ',')]
        snr: Vec<String>,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: Which,
    },
    /// Fine-tune and evaluate models with a fraction of nodes observed.
    StudySparsity {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long = "model", required = true, value_name = "NAME=DIR")]
        models: Vec<String>,
        /// Observed-sensor percentages (default from `eval.sensor_percent`).
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: Which,
    },
    /// Side-by-side headline metrics of two models.
    Compare {
        /// A study directory; compares two of its models.
        #[arg(long, value_name = "DIR", conflicts_with = "report")]
        study: Option<PathBuf>,
        /// Model names within the study (default: the first two).
        #[arg(long, value_delimiter = ',', requires = "study")]
        models: Vec<String>,
        /// `NAME=EVAL_DIR`, exactly twice, instead of a study.
        #[arg(long = "report", value_name = "NAME=DIR")]
        report: Vec<String>,
    },
    /// Re-render plots and a text summary from the JSON reports in a directory.
    Report {
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("MODALVGAE_THREADS") {
        let n: usize = raw.trim().parse().with_context(|| format!("MODALVGAE_THREADS={raw} is not a count"))?;
        if n == 0 {
            bail!("MODALVGAE_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    let c = &cli.common;
    match cli.command {
        Command::Generate { n } => commands::generate(c, n as usize),
        Command::Train { data, baseline } => commands::train(c, &data, baseline),
        Command::Eval { run, data, split, checkpoint } => commands::eval(c, &run, &data, split, checkpoint),
        Command::Predict { run, data, split, checkpoint, ids } => commands::predict(c, &run, &data, split, checkpoint, &ids),
        Command::StudyNoise { data, models, snr, checkpoint } => commands::study_noise(c, &data, &models, &snr, checkpoint),
        Command::StudySparsity { data, models, fractions, checkpoint } => {
            commands::study_sparsity(c, &data, &models, &fractions, checkpoint)
        }
        Command::Compare { study, models, report } => commands::compare(c, study.as_deref(), &models, &report),
        Command::Report { input } => commands::report(c, &input),
    }
}
