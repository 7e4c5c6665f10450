use thiserror::Error;

/// Errors raised by model construction, inference, fitting and I/O.
#[derive(Debug, Error)]
pub enum MsldsError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("numerical overflow: {0}")]
    Overflow(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MsldsError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MsldsError::InvalidConfig(_) => 1,
            MsldsError::NotPositiveDefinite(_)
            | MsldsError::Overflow(_)
            | MsldsError::Solver(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MsldsError>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(MsldsError::DimensionMismatch { expected, found });
    }
    Ok(())
}
