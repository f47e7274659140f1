use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid {what}: {reason}")]
    InvalidInput { what: String, reason: String },

    #[error("degenerate rest shape: covariance condition number {condition:e}")]
    DegenerateRestShape { condition: f64 },

    #[error("inverted or degenerate covariance: det = {det:e}, threshold = {threshold:e}")]
    InvertedOrDegenerate { det: f64, threshold: f64 },

    #[error("rotation-derivative operator is singular: condition estimate {condition:e}")]
    SingularG { condition: f64 },

    #[error("dense Hessian requested for {particles} particles, limit is {limit}")]
    CapacityExceeded { particles: usize, limit: usize },

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("degenerate configuration at newton iteration {iteration}: {source}")]
    DegenerateAlongPath {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {frame} failed: {source}")]
    StepFailed {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("finite-difference evaluation failed at coordinate {coordinate}: {message}")]
    OracleEvalFailure { coordinate: usize, message: String },

    #[error("shape mismatch: analytic has {analytic} entries, numeric has {numeric}")]
    ShapeMismatch { analytic: usize, numeric: usize },
}

impl Error {
    pub(crate) fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
