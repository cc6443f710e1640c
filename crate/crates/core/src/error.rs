use thiserror::Error;

use crate::confounder::ConfounderParams;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("risk set is empty at time zero")]
    DegenerateRiskSet,

    #[error("marginals are inconsistent with monotonicity: p_min {p_min} exceeds p_max {p_max}")]
    MonotonicityInfeasible { p_min: f64, p_max: f64 },

    #[error("marginals are inconsistent with step monotonicity: cell ({row}, {col}) = {value}")]
    StepMonotonicityInconsistent { row: usize, col: usize, value: f64 },

    #[error("dimension {0} is not supported by exact vertex enumeration (K <= 5)")]
    UnsupportedDimension(usize),

    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NoConvergence {
        iterations: usize,
        gradient_norm: f64,
        last: Box<ConfounderParams>,
    },

    #[error("monotonicity fails in strata: {}", .0.join(", "))]
    InfeasibleStratum(Vec<String>),

    #[error("every draw was discarded by the nonnegativity filter")]
    AllDrawsDiscarded,

    #[error("schema violation at row {row}, column `{column}`: {message}")]
    SchemaViolation {
        row: usize,
        column: String,
        message: String,
    },

    #[error("longitudinal record at row {row} references unknown subject `{subject_id}`")]
    OrphanRecord { row: usize, subject_id: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
