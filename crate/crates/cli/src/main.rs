//! `pilotstack`: collect driving data, train the steering network, drive the
//! simulated car and evaluate laps.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pilotstack_core::drive::DriveMode;

use crate::config::AppConfig;

/// Exit status 2 marks configuration/validation problems, 1 runtime failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn config(e: impl fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<pilotstack_core::Error> for CliError {
    fn from(e: pilotstack_core::Error) -> Self {
        use pilotstack_core::Error as E;
        match e {
            E::Config(_) | E::FingerprintMismatch | E::Shape(_) => CliError::config(e),
            _ => CliError::runtime(e),
        }
    }
}

#[derive(Parser)]
#[command(name = "pilotstack", version, about = "Simulated end-to-end RC car autopilot")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct GlobalArgs {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Track JSON (default: built-in 13 m course).
    #[arg(long, global = true)]
    track: Option<PathBuf>,
    /// Model architecture JSON (default: built-in five-conv network).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Telemetry service address (default: $PILOTSTACK_BIND or 127.0.0.1:8887).
    #[arg(long, global = true)]
    bind: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the control loop with telemetry and teleop control.
    Drive(commands::DriveArgs),
    /// Drive with the trained network (same as `drive --mode autopilot`).
    Autopilot(commands::DriveArgs),
    /// Generate labelled driving data with the reference pilot in simulated time.
    Collect(commands::CollectArgs),
    /// Train the network on one or more tubs.
    Train(commands::TrainArgs),
    /// Drive timed laps in simulated time and report them.
    EvalLap(commands::EvalArgs),
    /// Summarize a tub and write histogram CSV.
    Analyze(commands::AnalyzeArgs),
    /// Re-publish a recorded session through the telemetry service.
    Replay(commands::ReplayArgs),
    /// Write the active track (built-in unless --track is given) as JSON.
    MakeTrack(commands::MakeTrackArgs),
}

fn effective_config(global: &GlobalArgs) -> Result<AppConfig, CliError> {
    let mut cfg = AppConfig::load(global.config.as_deref())?;
    if let Some(t) = &global.track {
        cfg.track = Some(t.clone());
    }
    if let Some(m) = &global.model {
        cfg.model = Some(m.clone());
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(b) = &global.bind {
        cfg.telemetry.bind = Some(b.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.global)?;
    match cli.command {
        Command::Drive(args) => commands::drive(cfg, args),
        Command::Autopilot(mut args) => {
            args.mode = DriveMode::Autopilot;
            commands::drive(cfg, args)
        }
        Command::Collect(args) => commands::collect(cfg, args),
        Command::Train(args) => commands::train(cfg, args),
        Command::EvalLap(args) => commands::eval_lap(cfg, args),
        Command::Analyze(args) => commands::analyze(cfg, args),
        Command::Replay(args) => commands::replay(cfg, args),
        Command::MakeTrack(args) => commands::make_track(cfg, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
