use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A request field failed validation.
    #[error("invalid field `{field}`: {message}")]
    InvalidField { field: String, message: String },
    /// Masks were supplied but no control checkpoint is loaded.
    #[error("mask conditioning unavailable: load a control checkpoint to use masks")]
    ControlUnavailable,
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("stage mismatch: checkpoint is `{found}`, config expects `{expected}`")]
    StageMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("ambiguous prompt `{prompt}`; accepted templates: {templates}")]
    AmbiguousPrompt { prompt: String, templates: String },
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn field(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidField { field: field.into(), message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-parsable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidField { .. } => "invalid_field",
            Error::ControlUnavailable => "control_unavailable",
            Error::MissingGradient(_) => "missing_gradient",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::DuplicateParameter(_) => "duplicate_parameter",
            Error::Checkpoint(_) => "checkpoint",
            Error::HashMismatch(_) => "hash_mismatch",
            Error::Dependency(_) => "dependency",
            Error::StageMismatch { .. } => "stage_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Dataset(_) => "dataset",
            Error::AmbiguousPrompt { .. } => "ambiguous_prompt",
            Error::Leakage(_) => "leakage",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Format(_) => "format",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
