use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pose lies on or outside the constraint box: {0}")]
    BoundaryPose(String),
    #[error("template ({template_h}x{template_w}) does not fit inside image ({image_h}x{image_w})")]
    TemplateTooLarge {
        template_h: usize,
        template_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation cache is stale (weights generation {cache} != {weights})")]
    StaleCache { cache: u64, weights: u64 },
    #[error("all {0} optimization starts failed")]
    AllStartsFailed(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Decode { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn decode(path: impl AsRef<std::path::Path>, message: impl ToString) -> Self {
        Error::Decode {
            path: path.as_ref().display().to_string(),
            message: message.to_string(),
        }
    }

    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::AllStartsFailed(_) | Error::StaleCache { .. }
        )
    }
}
