use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: model has {expected} types, point has {got} coordinates")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("power iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("no witness found: {0}")]
    NoWitness(String),

    #[error("bisection stalled with bracket [{lo}, {hi}] after {steps} steps")]
    BisectionStalled { lo: f64, hi: f64, steps: usize },

    #[error("point is not a fixed point: residual {residual:e}")]
    NotAFixedPoint { residual: f64 },

    #[error("invalid conjugate: {0}")]
    InvalidConjugate(String),

    #[error("parameters exceed enumeration caps: {0}")]
    TooLarge(String),

    #[error("no replica went extinct; increase the number of replicas")]
    NoAcceptedReplicas,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
