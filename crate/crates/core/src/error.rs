use thiserror::Error;

/// Errors raised by solvers and diagnostics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The forward state left the finite range (or exceeded the divergence guard).
    #[error("forward solve diverged at step {step} (max-norm {max_norm:e})")]
    Divergence { step: usize, max_norm: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: {message}")]
    File { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn ensure_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(invalid(format!("{what}: length {got}, expected {expected}")));
    }
    Ok(())
}
