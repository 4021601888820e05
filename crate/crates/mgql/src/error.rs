use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("coefficient returned a non-finite value at observation {index}")]
    NonFiniteCoefficient { index: usize },

    #[error("numerical derivative of {target} is not finite")]
    NonFiniteDerivative { target: String },

    #[error("simulated path exploded at observation step {step} (|x| above {cap:e})")]
    PathExplosion { step: usize, cap: f64 },

    #[error("diffusion matrix is not positive definite at observation {index}")]
    SingularDiffusion { index: usize },

    #[error("quasi-likelihood value is not finite ({context})")]
    NonFinite { context: &'static str },

    #[error("degenerate data: {reason}")]
    DegenerateData { reason: String },

    #[error("normal equations for the drift parameters are singular")]
    SingularNormalEquations,

    #[error("information matrix {name} is singular")]
    SingularGamma { name: &'static str },

    #[error("{name} Hessian block is not negative definite at the fitted value")]
    NonPDHessian { name: &'static str },

    #[error("effective sample length n*h = {value} is not positive")]
    NonPositiveNh { value: f64 },

    #[error("all {total} candidate fits failed; first error: {first}")]
    AllCandidatesFailed { total: usize, first: String },

    #[error("no optimizer start produced a finite criterion value ({starts} starts)")]
    NoConvergence { starts: usize },

    #[error("optimizer failed: {reason}")]
    Optimizer { reason: String },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("invalid observation data at row {row}: {reason}")]
    BadRecord { row: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("failed to read {path}: {reason}")]
    Parse { path: String, reason: String },
}

impl Error {
    pub(crate) fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            reason: reason.into(),
        }
    }

    pub(crate) fn degenerate(reason: impl Into<String>) -> Self {
        Error::DegenerateData {
            reason: reason.into(),
        }
    }
}
