use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The smallest singular value fell below `singular_tol * sigma_max`.
    #[error("matrix is numerically singular (condition estimate {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("requested net is too large: {0}")]
    TooLarge(String),

    #[error("inconsistent parameters: {0}")]
    InconsistentParams(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("iterate diverged at step {step}")]
    DivergenceDetected { step: usize },

    #[error("cubic has repeated or complex roots (discriminant {discriminant:e})")]
    ComplexRoots { discriminant: f64 },

    #[error("argument outside domain: {0}")]
    DomainError(String),

    #[error("communication ratio {phi} is below the gate {gate}")]
    PhiTooSmall { phi: f64, gate: f64 },

    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("no coordinate passed the weight threshold")]
    EmptySelection,

    #[error("internal invariant failure: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, FedError>;

impl From<std::io::Error> for FedError {
    fn from(e: std::io::Error) -> Self {
        FedError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FedError {
    fn from(e: serde_json::Error) -> Self {
        FedError::Parse(e.to_string())
    }
}
