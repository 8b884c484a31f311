use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid disparity {0} (must exceed {eps})", eps = crate::camera::EPSILON_DISP)]
    InvalidDisparity(f64),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("scene generation error: {0}")]
    Generation(String),
    #[error("non-finite loss at step {step}; intermediate norms: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
