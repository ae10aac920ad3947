use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tilt parameters outside the model domain: {0}")]
    Domain(String),

    #[error("non-finite value at step {step}: {what}")]
    NumericOverflow { step: usize, what: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid specification: {0}")]
    Validation(String),

    #[error("oracle does not support this input: {0}")]
    UnsupportedOracle(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("eigen solution did not converge: {0}")]
    NoEigen(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("spectral radius condition violated: {0}")]
    Spectral(String),

    #[error("tilt search failed: {0}")]
    SearchFailed(String),

    #[error("bisection bracket not found after {0} doublings")]
    Bracket(usize),

    #[error("conditioning event too rare: estimated probability {prob:.3e} below floor {floor:.3e}")]
    ConditioningTooRare { prob: f64, floor: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn overflow(step: usize, what: impl Into<String>) -> Self {
        Error::NumericOverflow {
            step,
            what: what.into(),
        }
    }
}
