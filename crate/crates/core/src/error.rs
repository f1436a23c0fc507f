use std::path::PathBuf;

/// Everything that can go wrong in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file did not match its documented layout.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input whose content violates an invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value appeared during computation.
    #[error("numerics error in {layer}: {detail}")]
    Numerics {
        /// Where the bad value was produced.
        layer: String,
        /// What went wrong.
        detail: String,
    },

    /// Caller broke an API contract (shape mismatch and friends).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Every loss entry of a batch was masked out.
    #[error("degenerate batch: every pair is masked")]
    DegenerateBatch,

    /// A quantity has no meaningful value for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    /// Run configuration is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// I/O failure tied to a path.
    #[error("{path}: {source}")]
    Io {
        /// File being read or written.
        path: PathBuf,
        /// Underlying OS error.
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn numerics(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerics {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration and data problems, 3 for numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerics { .. } | Error::DegenerateBatch | Error::Undefined(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
