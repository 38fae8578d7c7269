use thiserror::Error;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum KbError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tokenizer: {0}")]
    Tokenize(String),

    #[error("record validation: {0}")]
    Validation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("bundle: {0}")]
    Bundle(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KbError>;
