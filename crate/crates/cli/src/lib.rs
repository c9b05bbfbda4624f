//! Command-line front end: every subcommand writes machine-readable
//! outputs plus a `manifest.json` into its output directory.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use args::{Cli, Command};
pub use error::{CliError, Result};

/// SHA-256 hex of a value's JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("value serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn run(cli: &Cli) -> Result<()> {
    use args::{SynthCommand, TokenizerCommand};
    match &cli.command {
        Command::Tokenizer {
            action: TokenizerCommand::Train(a),
        } => commands::data::tokenizer_train(a),
        Command::Synth {
            action: SynthCommand::Gen(a),
        } => commands::data::synth_gen(a),
        Command::Train(a) => commands::train::train(a),
        Command::Sweep(a) => commands::train::sweep(a),
        Command::Eval(a) => commands::eval::eval(a),
        Command::Analyze(a) => commands::eval::analyze(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(&cli)
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
