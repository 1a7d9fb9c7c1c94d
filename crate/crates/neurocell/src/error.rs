use thiserror::Error;

/// Error type shared by every module of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or raster extents do not line up; names the offending axes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A user-supplied parameter is outside its documented range.
    #[error("config error: {0}")]
    Config(String),
    /// An internal precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// A weight or data file is corrupt or shape-incompatible.
    #[error("format error: {0}")]
    Format(String),
    /// Synthetic scene generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
