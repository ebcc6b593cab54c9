use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the extrapolation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("threshold {q} is not below the auxiliary bound {bound}; lower the level p")]
    LevelTooHigh { q: f64, bound: f64 },

    #[error("rank-deficient design ({0}); reduce the number of basis functions")]
    RankDeficient(String),

    #[error("game infeasible: {0}")]
    GameInfeasible(String),

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("no feasible level: {}", .0.join("; "))]
    NoFeasibleLevel(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
