//! Command-line surface for jointmatch: synthetic data, preprocessing,
//! detection with any of the four methods, training and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
//! 3 degenerate input, 4 numerical failure.

mod args;
mod commands;
mod overlay;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use crate::args::{Cli, Command};
pub use crate::overlay::draw_quads;

/// Errors raised by subcommands, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(jointmatch::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<jointmatch::Error> for CliError {
    fn from(e: jointmatch::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use jointmatch::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(E::InvalidConfig(_)) => 1,
            CliError::Core(E::Io { .. } | E::Decode { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` and runs the chosen subcommand, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
