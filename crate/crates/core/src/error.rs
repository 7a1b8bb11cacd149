use thiserror::Error;

use crate::ilq::IterationTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("state diverged at time step {t}")]
    Divergence { t: usize },

    #[error("covariance of agent {agent} at time step {t} is not positive definite")]
    Covariance { agent: usize, t: usize },

    #[error("coupled stage system is singular at time step {t} (condition estimate {condition:e})")]
    StageSingular { t: usize, condition: f64 },

    #[error("non-finite value in {what} at time step {t}")]
    NonFinite { what: &'static str, t: usize },

    #[error("solver did not converge within {} iterations", .trace.len())]
    NonConvergence { trace: IterationTrace },

    #[error("line search found no acceptable step at iteration {iteration} (deviation {deviation:e})")]
    LineSearch { iteration: usize, deviation: f64 },

    #[error("ECE solve failed under weights {weights:?}: {source}")]
    WeightedSolve {
        weights: Vec<Vec<f64>>,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid weight: {0}")]
    InvalidWeight(String),

    #[error("empty trajectory batch")]
    EmptyBatch,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
