//! `asagan`: train, evaluate and inspect limited-data GANs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
//! numerical abort, 4 verification failure.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<asagan::Error> for CliError {
    fn from(e: asagan::Error) -> Self {
        match e {
            asagan::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "asagan", version, about = "Limited-data GAN training with implicit semantic augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides, `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the log, checkpoints and final metrics.
    Train(RunArgs),
    /// Score a checkpoint's generator against the training data.
    Eval(RunArgs),
    /// Write `n` generated samples.
    Sample(RunArgs),
    /// Decode straight lines between pairs of latent codes.
    Interpolate(RunArgs),
    /// Check the closed-form loss bound against Monte-Carlo estimates.
    VerifyBound(RunArgs),
    /// Draw convergence and loss curves from training logs.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long = "output_dir", alias = "output-dir", default_value = "asagan-out")]
        output_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let resolve = |a: &RunArgs| config::RunConfig::resolve(a.config.as_deref(), &a.overrides);
    match cli.command {
        Command::Train(a) => commands::train(&resolve(&a)?),
        Command::Eval(a) => commands::eval(&resolve(&a)?),
        Command::Sample(a) => commands::sample(&resolve(&a)?),
        Command::Interpolate(a) => commands::interpolate(&resolve(&a)?),
        Command::VerifyBound(a) => commands::verify_bound(&resolve(&a)?),
        Command::Plot { logs, output_dir } => plot::plot(&logs, &config::resolve_output(&output_dir)).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
