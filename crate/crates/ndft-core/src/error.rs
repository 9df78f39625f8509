use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("backward expects a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{context}: missing gradient for parameter '{name}'")]
    MissingGrad {
        context: &'static str,
        name: String,
    },

    #[error("label {label} out of range for {what} ({count} classes)")]
    LabelOutOfRange {
        what: &'static str,
        label: usize,
        count: usize,
    },

    #[error("unknown parameter group '{0}'")]
    UnknownGroup(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical error at iteration {iteration}: {msg}")]
    Numerical { iteration: u64, msg: String },

    #[error("render failed: {0}")]
    Render(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
