use std::path::PathBuf;

/// Errors produced anywhere in the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("label value {value} out of range for {num_classes} classes")]
    LabelOutOfRange { value: usize, num_classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot place {requested} objects on a {width}x{height} canvas")]
    Placement { requested: usize, width: usize, height: usize },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("semantics cache was built for different semantics")]
    CacheMismatch,

    #[error("{0} is undefined for this input")]
    UndefinedMetric(&'static str),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint archive: {0}")]
    CorruptArchive(String),

    #[error("checkpoint does not match configuration: {0}")]
    ConfigMismatch(String),

    #[error("epoch {epoch} outside schedule of {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
