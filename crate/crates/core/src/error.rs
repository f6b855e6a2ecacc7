use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no samples")]
    NoSamples,
    #[error("support violation: q > 0 but p = 0 at cell ({row}, {col})")]
    Support { row: usize, col: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite values in {0}")]
    NonFiniteValue(String),
    #[error("non-finite loss at step {step}; diagnostic dump written to {}", dump.display())]
    NonFinite { step: usize, dump: PathBuf },
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Errors that stem from a bad configuration or arguments rather than a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_) | Error::InvalidInput(_))
    }
}
