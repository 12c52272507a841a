//! Error type shared across the crate. Math-kernel misuse (shape mismatches)
//! panics loudly instead; this enum covers failures reachable from user input:
//! bad configs, bad files, non-monotonic streams, and diverged training.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI. Success is 0; each failure class gets
    /// a distinct nonzero code so scripts can tell them apart.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ordering(_) => 2,
            Error::Io(_) => 3,
            Error::Parse { .. } => 3,
            Error::Checkpoint(_) => 3,
            Error::Divergence(_) => 4,
        }
    }
}
