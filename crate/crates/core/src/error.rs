use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    ConvergenceFailure {
        iterations: usize,
        residual: f64,
        /// Residual per iteration, oldest first. Empty when not tracked.
        history: Vec<f64>,
    },

    #[error("holding cost overflowed at tau = {tau}")]
    Overflow { tau: usize },

    #[error("observation has zero likelihood (tau = {tau}, y = {y})")]
    ZeroLikelihood { tau: usize, y: usize },

    #[error("stop region is not an upper belief interval at tau = {tau}")]
    StructureViolation { tau: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
