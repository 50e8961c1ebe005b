use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched matrix or vector dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A requested class has no instances to build a center from.
    #[error("class {0} has no instances")]
    MissingClass(usize),

    /// Invalid numeric input (non-finite cost, bad marginals, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A parameter block received a non-finite gradient or value.
    #[error("non-finite values in parameter block `{0}`")]
    Numeric(String),

    /// Label outside the current class range.
    #[error("label {label} out of range for {num_classes} classes")]
    Index { label: usize, num_classes: usize },

    /// Exemplar budget violation.
    #[error("budget error: {0}")]
    Budget(String),

    /// Value outside its admissible range.
    #[error("range error: {0}")]
    Range(String),

    /// Inconsistent trainer or store state.
    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration (flags, config file, stream layout).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// CSV header does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
