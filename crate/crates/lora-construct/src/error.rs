use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("non-finite entry in {what} at ({row}, {col})")]
    NonFinite {
        what: String,
        row: usize,
        col: usize,
    },

    #[error("svd did not converge for {name} (condition estimate {condition:e})")]
    SvdNonConvergence { name: String, condition: f64 },

    #[error("{name} is numerically singular (condition estimate {condition:e} exceeds {ceiling:e})")]
    NonSingularityViolation {
        name: String,
        condition: f64,
        ceiling: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("every training run diverged: {0}")]
    AllRunsDiverged(String),

    #[error("pretraining hit the {cap}-iteration cap at loss ratio {ratio:.4}")]
    PretrainCap { cap: usize, ratio: f64 },

    #[error("deadline exceeded after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u128 },
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn is_assumption_violation(&self) -> bool {
        matches!(self, Error::NonSingularityViolation { .. })
    }
}
