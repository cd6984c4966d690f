use thiserror::Error;

/// Error type shared by the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("infeasible sampling budget: {0}")]
    Infeasible(String),

    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Exit code for the CLI: 2 for data/container errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadMagic { .. }
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::CheckpointMismatch(_)
            | Error::Io(_) => 2,
            _ => 1,
        }
    }
}
