//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has near-zero norm ({norm:e}), cannot normalize")]
    ZeroVector { norm: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("positive set is empty")]
    EmptyPositives,

    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),

    #[error("pseudo-labels missing on target batch")]
    MissingPseudoLabels,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("model is not prepared for source-free use")]
    NotPrepared,

    #[error("split ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),

    #[error("labels required: {0}")]
    LabelsRequired(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}
