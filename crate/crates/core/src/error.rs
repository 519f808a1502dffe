use thiserror::Error;

/// Errors raised across the solver, training and I/O layers.
#[derive(Debug, Error)]
pub enum QgError {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("spectral coefficients are not Hermitian (max defect {defect:e}, tolerance {tolerance:e})")]
    NotHermitian { defect: f64, tolerance: f64 },

    #[error("grid mismatch: expected n = {expected}, got n = {got}")]
    GridMismatch { expected: usize, got: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("simulation diverged at t = {t} ({cause})")]
    Diverged { t: f64, cause: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("primitive `{0}` has no registered vector-Jacobian product")]
    UnregisteredPrimitive(&'static str),

    #[error("backward requires a scalar loss node")]
    NonScalarLoss,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QgError>;
