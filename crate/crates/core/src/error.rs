use thiserror::Error;

/// Library-wide error type.
///
/// The CLI maps `Precondition` to exit code 2 and `Numerical` to exit
/// code 3; everything else is treated as an I/O or format failure.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inputs that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A numerical procedure failed (divergence, degenerate system, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File format violation while reading scene/feature/dataset files.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI contract (0 ok, 2 precondition, 3 numerical).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Precondition(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
