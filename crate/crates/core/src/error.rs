use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ambient dimension must be at least 2, got {0}")]
    InvalidDimension(usize),

    #[error("harmonic dimension N({dim}, {degree}) overflows u64")]
    Overflow { dim: usize, degree: usize },

    #[error("argument {value} at index {index} lies outside [-1, 1]")]
    OutOfDomain { value: f64, index: usize },

    #[error("row {row} has norm {norm}, expected a unit vector")]
    NonUnitRow { row: usize, norm: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} must be non-empty")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("no channel passed the selection threshold")]
    EmptySelection { tau_raw: Vec<f64> },

    #[error("gradient descent diverged at step {step}: residual norm {residual_norm:e}")]
    Divergence { step: usize, residual_norm: f64 },

    #[error("no sign change of the fixed-point equation inside [{lo:e}, {hi:e}]")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Failures of the numerical procedures themselves, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::EmptySelection { .. }
                | Error::Divergence { .. }
                | Error::NoSignChange { .. }
        )
    }
}
