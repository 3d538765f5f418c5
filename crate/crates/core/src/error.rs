use thiserror::Error;

/// Errors surfaced by model fitting, inference and file handling.
#[derive(Debug, Error)]
pub enum PimError {
    /// Shapes or settings that do not fit together (mismatched axes, bad counts).
    #[error("configuration error: {0}")]
    Config(String),

    /// Data that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation was called on a model that is not ready for it.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Malformed file content. `offset` is a byte offset for binary formats.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Malformed tabular content, located by 1-based row and column.
    #[error("parse error at row {row}, column {column}: {message}")]
    Table {
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PimError>;

pub(crate) fn mismatch(what: &str, axis: &str, left: usize, right: usize) -> PimError {
    PimError::Config(format!("{what}: {axis} mismatch ({left} vs {right})"))
}
