use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("timestep {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("prompt parse error at byte {position} (token `{token}`): {reason}")]
    Parse {
        position: usize,
        token: String,
        reason: String,
    },

    #[error("head `{0}` has a single class in the training data")]
    SingleClassHead(String),

    #[error("missing counterfactual for sample {sample}, attribute {attribute}")]
    MissingCounterfactual { sample: usize, attribute: String },

    #[error("missing trajectory point at tau={0}")]
    MissingGridPoint(usize),

    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
