//! Command failures and their process exit codes.

use std::fmt;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn not_converged(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NOT_CONVERGED,
            message: message.into(),
        }
    }

    pub fn precondition(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PRECONDITION,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<seldyn::Error> for CliError {
    fn from(e: seldyn::Error) -> Self {
        let message = e.to_string();
        match e {
            seldyn::Error::InvalidArgument(_) | seldyn::Error::File { .. } => Self::config(message),
            seldyn::Error::Divergence { .. } => Self::not_converged(message),
            seldyn::Error::Precondition(_) => Self::precondition(message),
        }
    }
}
