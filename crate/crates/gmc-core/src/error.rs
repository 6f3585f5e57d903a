use thiserror::Error;

/// Errors surfaced by grid construction, kernel evaluation and the
/// verification harness. Statistical failures are not errors; they are
/// reported through [`crate::report::TestReport`] verdicts.
#[derive(Debug, Error)]
pub enum GmcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("kernel not PSD on this grid: factorization failed at max jitter {max_jitter:e}, most negative eigenvalue estimate {min_eigenvalue:e}")]
    NotPositiveDefinite {
        max_jitter: f64,
        min_eigenvalue: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unknown suite '{name}'; valid suites: {}", valid.join(", "))]
    UnknownSuite { name: String, valid: Vec<String> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GmcError>;
