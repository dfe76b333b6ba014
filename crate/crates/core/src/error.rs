use std::io;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on axis `{axis}`: expected {expected}, got {actual}")]
    Dim {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("`{axis}` = {value} is not divisible by groups = {groups}")]
    Groups {
        axis: &'static str,
        value: usize,
        groups: usize,
    },

    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    DegenerateVariance(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("image decode failed for {path}: {reason}")]
    Image { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
