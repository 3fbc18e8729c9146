use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("disconnected network: node {0} is unreachable from the slack bus")]
    Disconnected(usize),

    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),

    #[error("combined matrix {index} is not positive definite")]
    NotPositiveDefinite { index: usize },

    #[error("combined forms are rank deficient: rank {rank} of {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("scaling did not converge in {iterations} iterations (gradient inf-norm {gradient_norm:e})")]
    NoConvergence {
        iterations: usize,
        gradient_norm: f64,
        best_t: Vec<f64>,
    },

    #[error("annulus sampling anomaly: {accepted} accepted out of {draws} draws")]
    SamplingAnomaly { accepted: usize, draws: usize },

    #[error("pivot coordinate {value:e} is too small to condition on")]
    PivotDegenerate { value: f64 },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("overflow while accumulating the estimate in linear space; enable log_space")]
    Overflow,

    #[error("dimension {dim} exceeds the oracle maximum {max}")]
    Refused { dim: usize, max: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing config field `{0}`")]
    MissingField(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Invalid(_)
            | Error::Disconnected(_)
            | Error::DuplicateEdge(..)
            | Error::MissingField(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Refused { .. } => 4,
            _ => 3,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::Degenerate(_))
    }
}
