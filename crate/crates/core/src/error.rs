use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("incompatible dimensions: {0}")]
    Dims(String),

    #[error("optimization diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("undefined rate {rate}: {detail}")]
    EmptyScores { rate: String, detail: String },

    #[error("malformed MTEN data: {0}")]
    Format(String),

    #[error("missing input {path}: {detail}")]
    Missing { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes used by the command-line tool.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_INPUT: i32 = 4;
    pub const DIMS: i32 = 5;
    pub const NUMERIC: i32 = 6;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => exit::CONFIG,
            Error::Missing { .. } | Error::Format(_) | Error::Png(_) => exit::MISSING_INPUT,
            Error::Shape { .. } | Error::Dims(_) => exit::DIMS,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::EmptyScores { .. } => exit::NUMERIC,
            Error::Invalid(_) | Error::Io(_) => exit::OTHER,
        }
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
