use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use upliftlab::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "upliftlab", version, about = "Train and evaluate uplift models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config with sections data, model, train, metrics.
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed (and the sampling seed of generated data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write report.json, curves and model.ckpt.
    Train(Common),
    /// Score the test split with a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic dataset with its ground truth.
    Generate(Common),
    /// Compute metrics for a score,treated,response CSV.
    ScoreFile {
        #[command(flatten)]
        common: Common,
        /// Overrides metrics.input.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Full model plus the three single-module removals.
    Ablate(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String, ExperimentError> {
    match cli.command {
        Command::Train(c) => {
            let r = experiment::run_train(&load(&c)?, &c.out)?;
            Ok(format!("test qini {:.6} auuc {:.6} -> {}", r.test.average.qini, r.test.average.auuc, c.out.display()))
        }
        Command::Evaluate { common, checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("model.ckpt"));
            let r = experiment::run_evaluate(&load(&common)?, &ckpt, &common.out)?;
            Ok(format!("test qini {:.6} (matches checkpoint: {:?})", r.test.average.qini, r.reproduces_checkpoint))
        }
        Command::Generate(c) => Ok(format!("wrote {}", experiment::run_generate(&load(&c)?, &c.out)?.display())),
        Command::ScoreFile { common, input } => {
            let r = experiment::run_score_file(&load(&common)?, input.as_deref(), &common.out)?;
            let m = r.metrics;
            Ok(format!("lift {:.6} qini {:.6} auuc {:.6} wau {:.6}", m.lift, m.qini, m.auuc, m.wau))
        }
        Command::Ablate(c) => {
            let rows = experiment::run_ablate(&load(&c)?, &c.out)?;
            Ok(rows.iter().map(|r| format!("{:<28} qini {:.6}", r.variant, r.test.qini)).collect::<Vec<_>>().join("\n"))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("upliftlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
