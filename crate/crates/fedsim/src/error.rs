use thiserror::Error;

/// Unified error type for the simulator.
///
/// `Config` covers bad experiment descriptions (rejected before any work
/// starts), `Input` covers data that fails validation at runtime, and
/// `Internal` marks states that indicate a bug rather than a user mistake.
/// Dimension mismatches in the hot numeric kernels are treated as programmer
/// error and panic via `assert!` instead of returning `Internal`.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;
