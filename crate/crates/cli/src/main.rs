//! `kgact`: train, evaluate and verify activation-compressed knowledge-graph
//! recommenders.
//!
//! Exit status is 0 when the command succeeded and its checks passed, 1 on
//! a failed check or runtime error, and 2 on a usage error.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = settings::Cli::parse();
    match commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<kgact_core::Error>() {
                Some(kgact_core::Error::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
