use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eventrl_cli::{execute, ExperimentKind, Invocation};

#[derive(Parser)]
#[command(name = "eventrl", version, about = "Event-driven multi-agent RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a parameter-shared TRPO policy.
    Train(Common),
    /// Evaluate a checkpoint or a fixed policy.
    Eval(Common),
    /// Search bus holding thresholds with differential evolution.
    BaselineOptimize(Common),
    /// Measure fixed-step race scaling.
    RaceStudy(Common),
    /// Train on fixed-step wildfire simulators and test event-driven.
    TransferStudy(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding `[experiment] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory, overriding `[experiment] out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Eval(a) => (ExperimentKind::Eval, a),
        Command::BaselineOptimize(a) => (ExperimentKind::BaselineOptimize, a),
        Command::RaceStudy(a) => (ExperimentKind::RaceStudy, a),
        Command::TransferStudy(a) => (ExperimentKind::TransferStudy, a),
    };
    let inv = Invocation {
        config: args.config,
        seed: args.seed,
        out: args.out,
    };
    match execute(kind, &inv) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
