use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A transform of the flow produced NaN or infinity.
    #[error("non-finite value produced by flow transform {transform}")]
    NonFiniteTransform { transform: usize },

    #[error("non-finite {what} at batch {batch}")]
    NonFiniteLoss { what: &'static str, batch: usize },

    #[error("no augmentation exceeded MSE threshold {threshold} after {tries} tries")]
    SamplingFailure { threshold: f64, tries: usize },

    #[error("checkpoint architecture mismatch: expected `{expected}`, found `{found}`")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    /// Stored and recomputed parameter checksums disagree.
    #[error("integrity check failed: {0}")]
    Integrity(String),

    /// A required upstream file or model is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
