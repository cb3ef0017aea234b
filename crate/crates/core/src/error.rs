use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at `{path}`: {detail}")]
    Shape { path: String, detail: String },

    #[error("non-finite value at `{path}`")]
    NonFinite { path: String },

    #[error("invalid graph state: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("genotype parse error in field {field}: {detail}")]
    GenotypeParse { field: usize, detail: String },

    #[error("dataset format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("while evaluating {genotype}: {source}")]
    Candidate {
        genotype: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_candidate(self, genotype: impl Into<String>) -> Self {
        Error::Candidate {
            genotype: genotype.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::GenotypeParse { .. } | Error::Contract(_) => 2,
            Error::Format { .. } | Error::InsufficientData(_) | Error::Csv(_) | Error::Json(_) => 3,
            Error::Io { .. } => 4,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::State(_) => 5,
            Error::Degenerate(_) | Error::Diverged { .. } => 6,
            Error::Candidate { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
