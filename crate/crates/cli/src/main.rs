//! `lethevit` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime failure (divergence, bad files),
//! 2 on usage or configuration errors.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<lethevit::Error> for CliError {
    fn from(e: lethevit::Error) -> Self {
        match e {
            lethevit::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "lethevit", version, about = "Attention-guided contrastive unlearning for ViTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Common {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value (repeatable), e.g. --set lr=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory that receives every file this command writes
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test sets and a random forget split
    GenData(Common),
    /// Train the original model on the full training set
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data
        #[arg(long)]
        data: PathBuf,
    },
    /// Produce an unlearned model with one of: lethevit, retrain, ft, ga, rl
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        /// Original model checkpoint (not needed for retrain)
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score checkpoints against the Retrain reference and write report.csv
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Retrain reference checkpoint
        #[arg(long)]
        retrain: PathBuf,
        /// Checkpoint to score, as LABEL=PATH (repeatable)
        #[arg(long = "model", value_name = "LABEL=PATH")]
        models: Vec<String>,
    },
    /// TA and MIA under attention-guided masking and write sweep.csv
    SweepMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Summarize run times and average gaps found in a run directory
    Report {
        /// Run directory holding manifests.jsonl and optionally report.csv
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(common) => commands::gen_data(&common),
        Command::Train { common, data } => commands::train(&common, &data),
        Command::Unlearn {
            common,
            method,
            data,
            model,
        } => commands::unlearn(&common, &method, &data, model.as_deref()),
        Command::Evaluate {
            common,
            data,
            retrain,
            models,
        } => commands::evaluate(&common, &data, &retrain, &models),
        Command::SweepMask { common, data, model } => commands::sweep_mask(&common, &data, &model),
        Command::Report { dir } => commands::report(&dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
