//! Command-line entry point: reproducible experiments over the full pipeline.

use clap::{Args, Parser, Subcommand};
use gatllm::error::Error;
use gatllm::experiment::{self, ExperimentConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gatllm",
    about = "Multivariate wireless link-quality forecasting: train, predict, and benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic telemetry CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output CSV path (default: <out_dir>/synthetic.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the forecaster; writes a checkpoint and a per-epoch loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Roll a trained checkpoint forward from the end of a data file.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Telemetry CSV supplying the context window.
        #[arg(long)]
        data: PathBuf,
        /// Number of autoregressive steps.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Output CSV path (default: <out_dir>/forecast.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate schemes over the test split and emit comparison artifacts.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of gatllm,nogat,univariate,varima,persistence.
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<String>>,
        /// Reuse a trained checkpoint for the gatllm scheme instead of
        /// training in place.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge report CSVs from earlier runs into one comparison table + plots.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Report CSVs written by `evaluate`.
        #[arg(long, value_delimiter = ',', required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| Path::new(&cfg.out_dir).join("synthetic.csv"));
            let (rows, cols) = experiment::cmd_generate(&cfg, &out)?;
            println!("wrote {rows} rows x {cols} columns to {}", out.display());
            Ok(())
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let outcome = experiment::cmd_train(&cfg)?;
            println!(
                "trained {} epochs (final mse {:.6e}); checkpoint {}; loss log {}",
                outcome.history.len(),
                outcome.history.last().copied().unwrap_or(f64::NAN),
                outcome.checkpoint_path.display(),
                outcome.loss_csv_path.display()
            );
            Ok(())
        }
        Command::Predict { common, checkpoint, data, steps, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| Path::new(&cfg.out_dir).join("forecast.csv"));
            let values =
                experiment::cmd_predict(&checkpoint, &data, steps, cfg.interpolation_points, &out)?;
            println!(
                "wrote {} x {} forecast to {}",
                values.shape()[0],
                values.shape()[1],
                out.display()
            );
            Ok(())
        }
        Command::Evaluate { common, schemes, checkpoint } => {
            let mut cfg = load_config(&common)?;
            if let Some(schemes) = schemes {
                cfg.evaluate.schemes = schemes;
                cfg.validate()?;
            }
            let (reports, files) = experiment::cmd_evaluate(&cfg, checkpoint.as_deref())?;
            for r in &reports {
                println!("evaluated scheme {} over {} cells", r.scheme, r.cells.len());
            }
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Compare { common, reports } => {
            let cfg = load_config(&common)?;
            let files = experiment::cmd_compare(&reports, Path::new(&cfg.out_dir))?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
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
