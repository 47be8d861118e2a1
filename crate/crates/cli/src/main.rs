use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Exit codes: 0 on success, 1 when processing fails or a quality gate is
/// missed, 2 for usage and configuration mistakes.
#[derive(Parser)]
#[command(name = "asrkit", version, about = "Phoneme recognition toolkit", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract filterbank features from a directory of wav files
    Featurize(commands::featurize::Args),
    /// Train a model on a manifest
    Train(commands::train::Args),
    /// Beam-decode one manifest split with a trained checkpoint
    Decode(commands::decode::Args),
    /// Score hypothesis transcripts against a reference manifest
    Score(commands::score::Args),
    /// Compare analytic gradients with finite differences
    Gradcheck(commands::gradcheck::Args),
    /// Generate a synthetic corpus for smoke tests and benchmarks
    Synth(commands::synth::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Featurize(args) => commands::featurize::run(&args),
        Command::Train(args) => commands::train::run(&args),
        Command::Decode(args) => commands::decode::run(&args),
        Command::Score(args) => commands::score::run(&args),
        Command::Gradcheck(args) => commands::gradcheck::run(&args),
        Command::Synth(args) => commands::synth::run(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code_for(&err))
        }
    }
}
