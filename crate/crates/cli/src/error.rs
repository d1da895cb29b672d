use std::fmt;
use std::path::Path;

use moesched_core::Error;

/// Process exit codes.
pub mod exit {
    pub const GENERIC: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const NO_FEASIBLE_PLAN: i32 = 4;
    pub const PARSE: i32 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new(exit::USAGE, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new(exit::GENERIC, format!("{}: {e}", path.display()))
    }

    /// Core error raised while handling `path`.
    pub fn in_file(path: &Path, e: Error) -> Self {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig { .. } => exit::CONFIG,
            Error::NoFeasiblePlan => exit::NO_FEASIBLE_PLAN,
            Error::InvalidTrace(_) => exit::PARSE,
            Error::InvalidRequest(_) | Error::InvalidStratification(_) => exit::USAGE,
            _ => exit::GENERIC,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
