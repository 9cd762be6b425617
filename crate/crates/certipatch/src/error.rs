use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file contents (IDX payloads, checkpoints, reports).
    #[error("format error: {0}")]
    Format(String),
    /// Pattern or patch parameters that do not fit the image shape.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Caller-supplied values outside their documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Non-finite values encountered during evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training diverged or could not proceed.
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
