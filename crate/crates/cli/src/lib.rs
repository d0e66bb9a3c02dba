//! Command implementations behind the `elmeta` binary.

pub mod config;
pub mod fit;
pub mod input;
pub mod output;
pub mod plot;
pub mod simulate;

use std::fmt;

/// Failure of a command, carrying its exit status.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, unreadable or malformed input. Exit status 1.
    Usage(String),
    /// A fit or computation failed. Exit status 2.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<elmeta::Error> for CliError {
    fn from(e: elmeta::Error) -> Self {
        match e {
            elmeta::Error::InvalidStudy { .. } | elmeta::Error::TooFewStudies { .. } | elmeta::Error::Config(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
