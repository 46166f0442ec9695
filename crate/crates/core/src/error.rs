use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("risk tolerance p = {0} is below 0.5; the tightened quadratic constraints would lose definiteness")]
    UnsupportedRisk(f64),

    #[error("grid would contain {count} points (cap {cap}); try tau >= {suggested_tau:.3e}")]
    TooManyPoints {
        count: u128,
        cap: usize,
        suggested_tau: f64,
    },

    #[error("structurally infeasible: {} constraint(s) have a negative bound, first at {:?}", .points.len(), .points.first().map(|p| &p.state))]
    StructurallyInfeasible { points: Vec<InfeasiblePoint> },

    #[error("trajectory generation failed from initial condition {initial:?}: {reason}")]
    Generation { initial: Vec<f64>, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A sample point whose tightened bound is negative, so no weight matrix can
/// satisfy the constraint built there.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct InfeasiblePoint {
    pub state: Vec<f64>,
    pub tag: crate::constraints::ConstraintTag,
    pub bound: f64,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
