use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for errors caused by a bad input rather than a library defect.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Invariant(_) | Error::NonFinite(_))
    }
}
