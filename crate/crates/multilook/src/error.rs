//! Error types shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array shapes do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An iterative solver failed to converge or encountered non-finite
    /// values; carries the final residual norm where available.
    #[error("solver failure: {message} (final residual {residual:.3e})")]
    SolverFailure { message: String, residual: f64 },

    /// The request exceeds what this build can compute (e.g. a dense
    /// oracle beyond its size cap).
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// A quantity that must be real or consistent between two evaluation
    /// routes drifted beyond tolerance.
    #[error("numerical consistency: {0}")]
    NumericalConsistency(String),

    /// Input is degenerate for the requested operation (e.g. all-zero
    /// measurements fed to the correlation estimator).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file does not conform to its declared format.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub fn solver(msg: impl Into<String>, residual: f64) -> Self {
        Error::SolverFailure {
            message: msg.into(),
            residual,
        }
    }

    /// Process exit code for this failure class. Documented in the README;
    /// `0` is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::DimensionMismatch(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::SolverFailure { .. } => 4,
            Error::Capability(_) => 5,
            Error::NumericalConsistency(_) => 6,
            Error::DegenerateInput(_) => 7,
        }
    }
}
