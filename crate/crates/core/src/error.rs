use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum NritError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure at {location}: {detail}")]
    Numeric { location: String, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("unknown token: {0:?}")]
    Token(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("world generation failed: {0}")]
    Generation(String),
    #[error("non-deterministic closure: {0}")]
    NonDeterministic(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<NritError>,
    },
}

impl NritError {
    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        NritError::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        NritError::Format {
            what,
            detail: detail.into(),
        }
    }
}

impl NritError {
    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ NritError::Stage { .. } => e,
            other => NritError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Process exit code: 2 configuration, 4 numeric, 3 any other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            NritError::Config(_) => 2,
            NritError::Numeric { .. } => 4,
            NritError::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub type Result<T, E = NritError> = std::result::Result<T, E>;
