use thiserror::Error;

/// Error categories used across the crate. The CLI maps each variant to a
/// distinct exit code.
#[derive(Error, Debug)]
pub enum AdaFocusError {
    /// Invalid configuration (bad field values, inconsistent dimensions
    /// requested by the user, missing prerequisites for a stage).
    #[error("configuration error: {0}")]
    Config(String),

    /// A call-site contract was violated (shape mismatch, out-of-range
    /// offset, empty input where non-empty is required).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// A persisted file is corrupt, truncated, or carries an unsupported
    /// version. The message names the offending field.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdaFocusError>;
