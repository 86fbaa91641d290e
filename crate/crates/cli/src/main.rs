//! `userdp`: calibrate, train and analyse user-level DP language models.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 calibration failure, 4 training halted by the concentration test,
//! 5 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use userdp::Error;

use crate::commands::Outcome;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "userdp", version, about = "User-level differentially private training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the noise multiplier for the configured mechanism.
    Calibrate(RunArgs),
    /// Train the character model; writes model.bin and history.csv.
    Train(RunArgs),
    /// Reduce every user to k records with the configured strategy.
    Select(RunArgs),
    /// Records-per-user statistics of the corpus.
    Stats(RunArgs),
    /// Noise curves, gradient concentration or a sweep, per [analysis].
    Analyze(RunArgs),
    /// Write the configured synthetic corpus as JSONL.
    Synth(RunArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        Ok(config)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Parse { .. }
            | Error::EmptyCorpus
            | Error::UnknownUser(_)
            | Error::RecordTooShort(_)
            | Error::Domain(_),
        ) => 2,
        Some(Error::Calibration(_) | Error::Unsatisfiable { .. }) => 3,
        Some(Error::Numeric(_)) => 5,
        _ => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Calibrate(a) => commands::calibrate(&a.load()?),
        Command::Train(a) => commands::train_cmd(&a.load()?),
        Command::Select(a) => commands::select(&a.load()?),
        Command::Stats(a) => commands::stats(&a.load()?),
        Command::Analyze(a) => commands::analyze(&a.load()?),
        Command::Synth(a) => commands::synth(&a.load()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Halted(_)) => ExitCode::from(4),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
