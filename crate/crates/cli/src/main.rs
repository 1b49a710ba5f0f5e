//! `glyco`: simulate a cohort, preprocess, train, forecast, decide, evaluate
//! and fine-tune, each step driven by one JSON run config.

mod commands;
mod config;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glyco_core::decision::Approach;
use glyco_core::seqgen::Mode;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or inputs (exit code 1).
    Validation(String),
    /// Failures while running (exit code 2).
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<glyco_core::Error> for CliError {
    fn from(e: glyco_core::Error) -> Self {
        use glyco_core::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::InvalidRecord(_)
            | E::Format(_)
            | E::Json(_)
            | E::UnknownChannel(_)
            | E::ModeMismatch { .. }
            | E::UnsupportedMode { .. }
            | E::MissingPhenotype(_)
            | E::WindowBounds { .. }
            | E::InsufficientData(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "glyco", version, about = "Glucose/insulin trajectory models and treatment decisions")]
struct Cli {
    /// Run config (JSON); a run manifest is accepted too.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a synthetic inpatient cohort.
    Cohort {
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        night_check_prob: Option<f64>,
    },
    /// Resample event records onto the hourly grid.
    Preprocess {
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Train a model on a preprocessed dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Comma-separated conditioning channels.
        #[arg(long)]
        channels: Option<String>,
    },
    /// Predictive quantiles for every midnight window.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        max_windows: Option<usize>,
    },
    /// Choose treatments for midnight contexts.
    Decide {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        approach: Option<Approach>,
        #[arg(long)]
        num_treatments: Option<usize>,
        #[arg(long)]
        num_outcomes: Option<usize>,
        #[arg(long)]
        max_contexts: Option<usize>,
    },
    /// Split-protocol forecast evaluation against both baselines.
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        splits: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the treatment decoder towards higher expected utility.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Cohort { .. } => "cohort",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Decide { .. } => "decide",
            Command::Evaluate { .. } => "evaluate",
            Command::Finetune { .. } => "finetune",
        }
    }

    /// Writes the subcommand's flags into the config.
    fn apply(&self, c: &mut RunConfig) -> Result<(), CliError> {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        match self {
            Command::Cohort {
                patients,
                days,
                night_check_prob,
            } => {
                set(&mut c.cohort.patients, patients);
                set(&mut c.cohort.sim.days, days);
                set(&mut c.cohort.sim.night_check_prob, night_check_prob);
            }
            Command::Preprocess { cohort } => set_path(&mut c.paths.cohort, cohort),
            Command::Train {
                dataset,
                steps,
                mode,
                channels,
            } => {
                set_path(&mut c.paths.dataset, dataset);
                set(&mut c.model.steps, steps);
                set(&mut c.model.mode, mode);
                if let Some(spec) = channels {
                    c.model.channels = glyco_core::seqgen::parse_channels(spec)?;
                }
            }
            Command::Predict {
                checkpoint,
                dataset,
                samples,
                max_windows,
            } => {
                set_path(&mut c.paths.checkpoint, checkpoint);
                set_path(&mut c.paths.dataset, dataset);
                set(&mut c.eval.samples, samples);
                set(&mut c.eval.max_windows, max_windows);
            }
            Command::Decide {
                checkpoint,
                dataset,
                approach,
                num_treatments,
                num_outcomes,
                max_contexts,
            } => {
                set_path(&mut c.paths.checkpoint, checkpoint);
                set_path(&mut c.paths.dataset, dataset);
                set(&mut c.decision.approach, approach);
                set(&mut c.decision.num_treatments, num_treatments);
                set(&mut c.decision.num_outcomes, num_outcomes);
                set(&mut c.decision.max_contexts, max_contexts);
            }
            Command::Evaluate { dataset, splits, steps } => {
                set_path(&mut c.paths.dataset, dataset);
                set(&mut c.eval.n_splits, splits);
                set(&mut c.model.steps, steps);
            }
            Command::Finetune {
                checkpoint,
                dataset,
                alpha,
                steps,
            } => {
                set_path(&mut c.paths.checkpoint, checkpoint);
                set_path(&mut c.paths.dataset, dataset);
                set(&mut c.finetune.alpha, alpha);
                set(&mut c.finetune.steps, steps);
            }
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.paths.out_dir = o.clone();
    }
    cli.command.apply(&mut config)?;
    config.validate()?;
    commands::run(cli.command.name(), &config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLYCO_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
