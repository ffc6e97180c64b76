//! Scenario runner for the path-following guidance library.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Runtime(String),
}

#[derive(Parser)]
#[command(name = "pathmpc", version, about = "Fixed-wing path-following guidance: simulation, comparison and system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for the artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated path presets (path1..path4).
    #[arg(long, global = true)]
    paths: Option<String>,
    /// Comma-separated controllers (cr-mpc, mpcc, lookahead).
    #[arg(long, global = true)]
    controllers: Option<String>,
    #[arg(long, global = true)]
    laps: Option<u32>,
    /// Comma-separated horizon lengths for the sweep.
    #[arg(long, global = true)]
    horizon_list: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its log and metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Record wall-clock solve times (makes artifacts run-dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Run every selected controller on every selected path preset.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Generate maneuver data, fit the model and validate it.
    Sysid {
        #[command(flatten)]
        common: Common,
        /// Add the attitude/airspeed measurement noise preset.
        #[arg(long)]
        noise: bool,
    },
    /// Time the controller over a list of horizon lengths.
    HorizonSweep {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, timing } => commands::simulate(Config::load(common.config.as_deref())?, &common, timing),
        Command::Compare { common } => commands::compare(Config::load(common.config.as_deref())?, &common),
        Command::Sysid { common, noise } => commands::sysid(Config::load(common.config.as_deref())?, &common, noise),
        Command::HorizonSweep { common } => commands::horizon_sweep(Config::load(common.config.as_deref())?, &common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
