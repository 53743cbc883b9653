mod commands;
mod manifest;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(dispatch(std::env::args_os()))
}

/// Parses `argv` and runs the selected command, returning the process exit
/// code: 0 success, 1 usage, 2 data error, 3 numeric failure.
fn dispatch<I: IntoIterator<Item = OsString>>(argv: I) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
                CliError::Numeric(_) => 3,
            }
        }
    }
}
