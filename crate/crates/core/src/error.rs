use thiserror::Error;

use crate::graph::Violation;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("graph `{id}` failed validation: {}", format_violations(.violations))]
    Validation {
        id: String,
        violations: Vec<Violation>,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate marginals: {0}")]
    DegenerateMarginals(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Wraps an error with the name of the pipeline phase it aborted.
    pub fn in_phase(self, phase: &str) -> Self {
        Error::Phase {
            phase: phase.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
