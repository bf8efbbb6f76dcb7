//! `ratesynth`: prepare claim-frequency data, train synthesizers, draw
//! synthetic tables, evaluate them and account for privacy.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! fault, 1 anything else.

mod accountant;
mod config;
mod evaluate;
mod exit;
mod prepare;
mod run;
mod standin;
mod synthesize;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "ratesynth", version, about = "Synthetic insurance claim-frequency data")]
struct Cli {
    /// More log output on standard error (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that works on a run directory.
#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long, env = "RATESYNTH_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Filter the raw table, fit the schema and write the prepared data.
    Prepare(RunArgs),
    /// Train the configured synthesizer on the prepared data.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the latest checkpoint of the run.
        #[arg(long)]
        resume: bool,
    },
    /// Draw a synthetic table from a trained checkpoint.
    Synthesize {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        args: synthesize::SynthesizeArgs,
    },
    /// Compare a synthetic table with the real one.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        args: evaluate::EvaluateArgs,
    },
    /// Privacy spent by noisy subsampled steps, or the noise a target ε needs.
    Accountant(accountant::AccountantArgs),
    /// Write a stand-in table shaped like the claim-frequency data.
    Standin(standin::StandinArgs),
    /// Print the effective run configuration.
    ShowConfig(RunArgs),
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Prepare(run) => prepare::run(&run.load()?),
        Command::Train { run, resume } => train::run(&run.load()?, *resume),
        Command::Synthesize { run, args } => synthesize::run(&run.load()?, args),
        Command::Evaluate { run, args } => evaluate::run(&run.load()?, args),
        Command::Accountant(args) => accountant::run(args),
        Command::Standin(args) => standin::run(args),
        Command::ShowConfig(run) => {
            print!("{}", run.load()?.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::from(exit::EXIT_OK),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::exit_code(&err))
        }
    }
}
