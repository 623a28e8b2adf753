//! `comp`: train the toy model, score layers, prune, evaluate, compare
//! strategies and run ablations.
//!
//! Exit codes: 0 ok, 1 usage or config error, 2 I/O, 3 training divergence,
//! 4 bad checkpoint or model, 5 infeasible prune config, 6 solver failure.

mod commands;
mod config;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

#[derive(Parser)]
#[command(name = "comp", version, about = "Hybrid layer and neuron pruning for a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model on a byte corpus.
    Train(commands::train::TrainArgs),
    /// Per-layer redundancy and importance.
    ScoreLayers(commands::score::ScoreArgs),
    /// Prune a checkpoint with COMP or a baseline strategy.
    Prune(commands::prune::PruneArgs),
    /// Perplexity, and fidelity against a baseline model.
    Eval(commands::eval::EvalArgs),
    /// Strategy × ratio × seed grid.
    Compare(commands::compare::CompareArgs),
    /// Paired ablation runs.
    Ablate(commands::ablate::AblateArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::ScoreLayers(a) => commands::score::run(a),
        Command::Prune(a) => commands::prune::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Compare(a) => commands::compare::run(a),
        Command::Ablate(a) => commands::ablate::run(a),
    }
}

fn main() -> ExitCode {
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
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
