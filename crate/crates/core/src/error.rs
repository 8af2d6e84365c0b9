use std::path::PathBuf;

/// Errors surfaced by every stage of the tracking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("dimension error: expected {expected}, found {found} ({context})")]
    Dimension {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Coverage(_) => "coverage",
            Error::Dimension { .. } => "dimension",
            Error::Degenerate(_) => "degenerate",
            Error::Size(_) => "size",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
