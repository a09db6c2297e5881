use std::path::PathBuf;

use crate::types::{MethodId, MetricId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("duplicate metric entry ({method}, {realization}, {n}, {metric})")]
    DuplicateEntry {
        method: MethodId,
        realization: usize,
        n: usize,
        metric: MetricId,
    },

    #[error("insufficient data for n={n}, {metric}: {methods} method(s) and {realizations} realization(s) survive filtering (need at least 2 of each)")]
    InsufficientData {
        n: usize,
        metric: MetricId,
        methods: usize,
        realizations: usize,
    },

    #[error("covered count {covered} exceeds test size {n_test}")]
    InvalidCount { covered: u64, n_test: u64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training size {n} exceeds pool size {pool}; feasible n levels: {feasible:?}")]
    SizeExceedsPool {
        n: usize,
        pool: usize,
        feasible: Vec<usize>,
    },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("column '{0}' not found")]
    MissingColumn(String),

    #[error("non-finite loss at epoch {epoch}")]
    ConvergenceFailure { epoch: usize },

    #[error("SWAG collected {snapshots} snapshot(s); at least 2 are required")]
    TooFewSnapshots { snapshots: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("posterior failed diagnostics (max R-hat {max_rhat:.4}, min bulk ESS {min_ess:.1})")]
    Unconverged { max_rhat: f64, min_ess: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures that mark a training cell as unconverged rather
    /// than aborting the sweep.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::ConvergenceFailure { .. } | Error::TooFewSnapshots { .. }
        )
    }
}
