use thiserror::Error;

pub type Result<T> = std::result::Result<T, CanviError>;

#[derive(Debug, Error)]
pub enum CanviError {
    /// A parameter fell outside the domain of the requested operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An argument was structurally invalid (empty input, mismatched dims, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A forward model produced a non-finite or out-of-range state.
    #[error("simulation failed for theta = {theta:?}: {reason}")]
    Simulation { theta: Vec<f64>, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("grid evaluation unsupported for theta dimension {0} (max 3)")]
    UnsupportedDimension(usize),

    #[error("every candidate failed: {0}")]
    AllCandidatesFailed(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CanviError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        CanviError::Domain(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        CanviError::Argument(msg.into())
    }
}
