//! `learnlock` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 crafting did not converge (artifacts are still written), 4 key and
//! dataset fingerprints disagree.

mod args;
mod commands;
mod failure;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(&cli, a),
        Command::Craft(a) => commands::craft(&cli, a),
        Command::Lock(a) => commands::lock(&cli, a),
        Command::Unlock(a) => commands::unlock(&cli, a),
        Command::Train(a) => commands::train(&cli, a),
        Command::Eval(a) => commands::eval(&cli, a),
        Command::Report(a) => commands::report(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
