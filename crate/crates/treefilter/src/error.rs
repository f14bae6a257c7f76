use std::path::PathBuf;

/// Error type shared by all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed header, bad magic, unsupported format variant.
    #[error("parse error: {0}")]
    Parse(String),

    /// Payload ended before the header-declared element count.
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Brute-force / enumeration guards.
    #[error("size cap exceeded: {nodes} nodes over cap {cap}")]
    CapExceeded { nodes: usize, cap: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
