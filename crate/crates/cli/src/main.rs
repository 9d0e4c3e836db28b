//! `gpcdl`: simulate data, fit dictionaries, cross-validate lengthscales,
//! and export spectral reports. Exit status 0 on success, 2 on a config or
//! input error, 3 on a numerical or degenerate failure.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "gpcdl", version, about = "Convolutional dictionary learning with Gaussian-process template priors")]
struct Cli {
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its ground truth from the simulation section.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a dictionary from a dataset.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth for perturbed initialization and dictionary errors.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Held-out trials for pll and R² in metrics.csv.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Estimate kernel hyperparameters by marginal likelihood first.
        #[arg(long)]
        hyper_ml: bool,
    },
    /// Cross-validate the lengthscale grid of the crossval section.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Per-template spectral reports of a fit.
    Spectrum {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate kernel hyperparameters by marginal likelihood.
    Hyper {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the simulated dictionary-error benchmark of the table section.
    Table {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::input("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(format!("cannot start {n} workers: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::Fit {
            config,
            data,
            out,
            truth,
            test,
            hyper_ml,
        } => commands::fit(&config, &data, &out, truth.as_deref(), test.as_deref(), hyper_ml),
        Command::Crossval { config, data, out, truth } => commands::crossval(&config, &data, &out, truth.as_deref()),
        Command::Spectrum { fit, data, out } => commands::spectrum(&fit, &data, &out),
        Command::Hyper { config, data, out, truth } => commands::hyper(&config, &data, &out, truth.as_deref()),
        Command::Table { config, out } => commands::table(&config, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
