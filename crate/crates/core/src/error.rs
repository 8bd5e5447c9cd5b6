use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("label style {id} is out of range for {num_styles} styles")]
    InvalidStyle { id: usize, num_styles: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("annotation is not binary")]
    NonBinaryAnnotation,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("image of size {size} cannot contain the requested object: {reason}")]
    ImageTooSmall { size: usize, reason: String },
    #[error("label style {0} is missing")]
    MissingStyle(usize),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (snapshot: {})", snapshot.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        snapshot: Option<PathBuf>,
    },
    #[error("mismatched test splits: {0}")]
    MismatchedSplits(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Png(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
