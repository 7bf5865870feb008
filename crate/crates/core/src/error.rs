use thiserror::Error;

/// Errors across the whole pipeline.
#[derive(Error, Debug)]
pub enum DreamError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("k-core filtering with k={k} removed every interaction")]
    EmptyAfterFilter { k: usize },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },
    #[error("non-finite gradient in parameter `{param}` at index {index}")]
    NonFiniteGrad { param: String, index: usize },
    #[error("gradient check failed for `{term}`: max relative error {max_rel_err:.3e}")]
    GradCheckFailed { term: String, max_rel_err: f64 },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DreamError>;

impl DreamError {
    /// Process exit code for the CLI: 2 for data problems, 3 for numeric
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DreamError::Parse { .. }
            | DreamError::EmptyDataset(_)
            | DreamError::EmptyAfterFilter { .. }
            | DreamError::Dimension { .. }
            | DreamError::Io(_)
            | DreamError::Json(_) => 2,
            DreamError::NonFinite { .. }
            | DreamError::NonFiniteGrad { .. }
            | DreamError::GradCheckFailed { .. } => 3,
            _ => 1,
        }
    }
}
