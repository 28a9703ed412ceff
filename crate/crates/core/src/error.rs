use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration constraint was violated; `field` names the offending value.
    #[error("invalid config: {message}")]
    Config { field: &'static str, message: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("at least two distinct labels are required: {0}")]
    SingleLabel(String),

    #[error("non-finite energy gradient at Langevin step {step}")]
    NonFiniteGradient { step: usize },

    #[error("training diverged at iteration {iteration}: {component} is not finite")]
    Divergence { iteration: u64, component: &'static str },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("no items")]
    NoItems,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("index file: {0}")]
    IndexFormat(String),

    #[error("empty index")]
    EmptyIndex,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config { field, message: message.into() }
    }
}
