use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A mapped column is absent from the input header.
    #[error("schema error: column `{column}` not found in header")]
    MissingColumn { column: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Fewer usable rows than the requested operation needs.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("predictor covariance is singular (condition number {condition:.3e}); collinear columns: {columns:?}")]
    Singular { condition: f64, columns: Vec<String> },

    /// No sensitivity value yields a positive semidefinite joint covariance.
    #[error("no feasible correlation on the grid for subset {subset:?}; joint covariance eigenvalues at rho = 0: {eigenvalues_at_zero:?}")]
    Infeasible {
        subset: Vec<usize>,
        eigenvalues_at_zero: Vec<f64>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
