//! `foresight`: generate worlds, validate timelines, train, evaluate, report.
//!
//! Exit codes: 0 success, 1 domain violation (leakage or split), 2 structural
//! or I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::{parse_fraction, ModeSelection, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "foresight",
    version,
    about = "Outcome-resolved forecasting pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Global seed; drives world generation, training and evaluation sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` config file. Flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for rollouts and evaluation. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and write train/test splits plus the ground-truth sidecar.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_events: Option<usize>,
        /// Decimal or ratio, e.g. 5120/5620.
        #[arg(long, value_parser = parse_fraction)]
        train_fraction: Option<f64>,
        #[arg(long)]
        feature_dim: Option<usize>,
    },
    /// Check a dataset file for temporal leakage.
    Validate {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy with group-relative policy gradients.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training split (JSONL).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out split evaluated at every checkpoint.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Resume from a `stepN.state.json` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint (and optionally the untrained policy) on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint (`stepN.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// single, ensemble7 or both.
        #[arg(long)]
        mode: Option<ModeSelection>,
        /// Also score the zero-initialised policy.
        #[arg(long)]
        baseline_untrained: bool,
        /// Permit scoring a train-split file.
        #[arg(long)]
        allow_train: bool,
    },
    /// Summarise evaluation and training outputs into a table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory written by `eval`.
        #[arg(long)]
        eval_dir: PathBuf,
        /// Directory written by `train`, for learning-curve statistics.
        #[arg(long)]
        train_dir: Option<PathBuf>,
        /// Ground-truth sidecar, for the Bayes-optimal comparison.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)
            .map_err(|e| Failure::Structural(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads);
    }
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Structural(format!("cannot start {n} worker threads: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            common,
            n_events,
            train_fraction,
            feature_dim,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = n_events {
                cfg.n_events = n;
            }
            if let Some(f) = train_fraction {
                cfg.train_fraction = f;
            }
            if let Some(d) = feature_dim {
                cfg.feature_dim = d;
            }
            commands::generate(&cfg)
        }
        Command::Validate { path, common } => {
            resolve(&common)?;
            commands::validate(&path)
        }
        Command::Train {
            common,
            data,
            test,
            steps,
            learning_rate,
            resume,
        } => {
            let mut cfg = resolve(&common)?;
            if data.is_some() {
                cfg.train_data = data;
            }
            if test.is_some() {
                cfg.test_data = test;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            commands::train(&cfg, resume.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            mode,
            baseline_untrained,
            allow_train,
        } => {
            let mut cfg = resolve(&common)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if data.is_some() {
                cfg.test_data = data;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            commands::eval(&cfg, baseline_untrained, allow_train)
        }
        Command::Report {
            common,
            eval_dir,
            train_dir,
            truth,
        } => {
            let mut cfg = resolve(&common)?;
            if truth.is_some() {
                cfg.truth = truth;
            }
            commands::report(&cfg, &eval_dir, train_dir.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
