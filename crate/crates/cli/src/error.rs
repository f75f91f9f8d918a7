use std::path::PathBuf;

use flamesplat::io::IoError;
use thiserror::Error;

/// Exit codes: 2 validation, 3 missing input, 4 numeric failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("missing input: {}", .0.display())]
    Missing(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Missing(_) | CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Missing(p) => CliError::Missing(p),
            IoError::Format { .. } => CliError::Validation(e.to_string()),
            IoError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}

pub fn numeric(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}

pub fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}
