//! `cpsets`: conformal prediction sets from precomputed classifier scores.

mod commands;
mod error;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;
use settings::Settings;

#[derive(Parser)]
#[command(
    name = "cpsets",
    version,
    about = "Conformal prediction sets from classifier score matrices"
)]
#[command(after_help = "Exit status: 0 success, 2 usage error, 3 I/O error, 4 data error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV or binary score file and store it as binary
    Ingest(Settings),
    /// Generate a synthetic problem with known conditional probabilities
    Synth(Settings),
    /// Fit a softmax temperature to logits by NLL minimization
    FitTemp(Settings),
    /// Choose k_reg and lambda for RAPS on tuning data
    Tune(Settings),
    /// Calibrate a set predictor and write the model file
    Calibrate(Settings),
    /// Write one prediction set per row: index,size,classes...
    Predict(Settings),
    /// Coverage, size, SSCV and stratified tables of a model on labelled scores
    Evaluate(Settings),
    /// Repeated random-split comparison of methods, with report tables
    Experiment(Settings),
}

type Handler = fn(&Settings) -> Result<(), CliError>;

fn run(command: Command) -> Result<(), CliError> {
    let (settings, f): (Settings, Handler) = match command {
        Command::Ingest(s) => (s, commands::ingest),
        Command::Synth(s) => (s, commands::synth),
        Command::FitTemp(s) => (s, commands::fit_temp),
        Command::Tune(s) => (s, commands::tune),
        Command::Calibrate(s) => (s, commands::calibrate_cmd),
        Command::Predict(s) => (s, commands::predict),
        Command::Evaluate(s) => (s, commands::evaluate),
        Command::Experiment(s) => (s, commands::experiment),
    };
    f(&settings.resolve()?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cpsets: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
