use std::path::PathBuf;

/// Errors produced anywhere in the denoising pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("unsupported maxval {maxval} at byte {offset}")]
    UnsupportedMaxval { offset: usize, maxval: u32 },

    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint tensor `{name}` has dims {found:?}, config expects {expected:?}")]
    CheckpointDims {
        name: String,
        found: [usize; 4],
        expected: [usize; 4],
    },

    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// The error with any `Decode` path context stripped.
    pub fn innermost(&self) -> &Error {
        match self {
            Error::Decode { source, .. } => source.innermost(),
            e => e,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
