use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HvedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HvedError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("product of experts needs at least one expert")]
    EmptyExperts,

    #[error("modality subset must be non-empty")]
    EmptySubset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("unknown region `{0}` (expected complete, core or enhancing)")]
    UnknownRegion(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing entry `{0}`")]
    MissingEntry(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("training diverged at iteration {iteration} (last good iteration {last_good:?}): {source}")]
    Diverged {
        iteration: u64,
        last_good: Option<u64>,
        #[source]
        source: Box<HvedError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HvedError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HvedError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HvedError::Io { path: path.into(), source }
    }

    /// Process exit code for the error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            HvedError::Config { .. } | HvedError::InvalidArgument(_) | HvedError::UnknownRegion(_) => 3,
            HvedError::Io { .. } | HvedError::Format(_) => 4,
            HvedError::Data(_) | HvedError::MissingEntry(_) | HvedError::LabelOutOfRange { .. } => 5,
            HvedError::ShapeMismatch { .. }
            | HvedError::NonScalarLoss { .. }
            | HvedError::EmptyExperts
            | HvedError::EmptySubset => 6,
            HvedError::NonFinite { .. } | HvedError::Diverged { .. } => 7,
            HvedError::CheckpointMismatch(_) => 8,
        }
    }
}
