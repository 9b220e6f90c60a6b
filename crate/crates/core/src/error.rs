use std::path::PathBuf;

use thiserror::Error;

use crate::sabr::SabrParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("index ({i}, {j}, {k}) out of bounds for grid {dims:?}")]
    IndexOutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        dims: (usize, usize, usize),
    },

    #[error("value {value} outside the domain of the {transform} transform")]
    TransformDomain { transform: &'static str, value: f64 },

    #[error("{path}: row {row}: {message}")]
    Schema {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("calibration did not converge after {iterations} iterations (objective {objective:.3e})")]
    NoConvergence {
        iterations: usize,
        objective: f64,
        best: SabrParams,
    },

    #[error("slice (maturity {maturity}, tenor {tenor}): {source}")]
    Slice {
        maturity: f64,
        tenor: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training aborted at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_slice(self, maturity: f64, tenor: f64) -> Self {
        Error::Slice {
            maturity,
            tenor,
            source: Box::new(self),
        }
    }
}
