use thiserror::Error;

/// Errors raised by the models, solvers, learners and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("coverage violation: behavior probability is zero for state {state}, action {action}")]
    CoverageViolation { state: usize, action: usize },

    #[error("invalid aliasing: {0}")]
    InvalidAliasing(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("no fixed point: {0}")]
    NoFixedPoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("infinite variance: spectral radius of the squared-return transition matrix is {spectral_radius}")]
    InfiniteVariance { spectral_radius: f64 },

    #[error("divergence at step {step}: non-finite {what}")]
    Divergence { step: usize, what: &'static str },

    #[error("negative input: {0}")]
    NegativeInput(String),

    #[error("missing context: {0}")]
    MissingContext(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("every sweep cell diverged")]
    AllDiverged,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
