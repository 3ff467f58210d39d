use thiserror::Error;

use crate::TaskId;

#[derive(Debug, Error)]
pub enum AcllError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("unknown task {task} ({registered} registered)")]
    InvalidTask { task: TaskId, registered: TaskId },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("weight {index} is already owned by task {owner}")]
    OwnershipViolation { index: usize, owner: TaskId },

    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("lagrange multiplier must be non-negative, got {0}")]
    InvalidMultiplier(f64),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("evaluation failed at theta {theta:?}: {source}")]
    Evaluation {
        theta: Vec<f64>,
        #[source]
        source: Box<AcllError>,
    },

    /// Failure inside a named strategy or task of a run.
    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<AcllError>,
    },

    /// Failure reported by an external evaluator (e.g. a C callback).
    #[error("external evaluator failed: {0}")]
    External(String),

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AcllError {
    pub fn within(self, context: impl Into<String>) -> Self {
        AcllError::Run { context: context.into(), source: Box::new(self) }
    }
}

pub type Result<T, E = AcllError> = std::result::Result<T, E>;
