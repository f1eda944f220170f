use thiserror::Error;

/// Errors raised by simulation, estimation and the command-line harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("hazard is not positive: z'beta(t) = {value} at t = {time}")]
    PositivityViolation { time: f64, value: f64 },

    #[error("cumulative hazard decreases near t = {time}")]
    NonMonotone { time: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular at-risk design matrix at t = {time}")]
    SingularDesign { time: f64 },

    #[error("estimating-equation Jacobian is singular (reciprocal condition {rcond:e})")]
    SingularJacobian { rcond: f64 },

    #[error("EM iterations did not converge after {iterations} iterations (last change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::PositivityViolation { .. } => "positivity_violation",
            Self::NonMonotone { .. } => "non_monotone",
            Self::Config(_) => "config",
            Self::SingularDesign { .. } => "singular_design",
            Self::SingularJacobian { .. } => "singular_jacobian",
            Self::NotConverged { .. } => "not_converged",
            Self::Parse { .. } => "parse",
            Self::Io(_) => "io",
        }
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Io(_) => 3,
            Self::Config(_) => 4,
            Self::Parse { .. } => 5,
            Self::PositivityViolation { .. } => 6,
            Self::SingularDesign { .. } => 7,
            Self::NotConverged { .. } => 8,
            Self::SingularJacobian { .. } => 9,
            Self::NonMonotone { .. } => 10,
        }
    }
}
