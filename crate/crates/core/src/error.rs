use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input: malformed files, invalid values, ill-posed requests.
    Validation,
    /// The inputs were fine but a numerical routine failed.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error in row {row}, column `{column}`: cannot read `{value}` as a finite number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("validation error in row {row} (estimate `{estimate_id}`): {message}")]
    InvalidEstimate {
        row: usize,
        estimate_id: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cluster-robust inference undefined: {0}")]
    ClusterInference(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rank-deficient design: collinear columns [{}]", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("{message} ({} trace entries)", .trace.len())]
    NonConvergence { message: String, trace: Vec<String> },

    #[error("{candidates} candidates exceed the exact-enumeration bound of {max}; reduce the candidate set")]
    EnumerationBound { candidates: usize, max: usize },

    #[error("degenerate ensemble: every model has zero evidence")]
    DegenerateEnsemble,

    #[error("simulation budget exhausted: {proposals} proposals for {retained} of {target} retained estimates")]
    Budget {
        proposals: u64,
        retained: usize,
        target: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain(_)
            | Error::NonConvergence { .. }
            | Error::DegenerateEnsemble
            | Error::Budget { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}
