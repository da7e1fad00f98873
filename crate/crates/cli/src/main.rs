mod args;
mod commands;

use args::{Cli, Command, ConfigFile};
use clap::Parser;
use commands::CliError;
use std::process::ExitCode;

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Calibrate(a) => commands::cmd_calibrate(a),
        Command::Transfer(a) => {
            let config = ConfigFile::load().map_err(CliError::Usage)?;
            commands::cmd_transfer(a.merged(&config))
        }
        Command::Simulate(a) => {
            let config = ConfigFile::load().map_err(CliError::Usage)?;
            commands::cmd_simulate(a.merged(&config))
        }
        Command::Report(a) => commands::cmd_report(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("httpwatt: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
