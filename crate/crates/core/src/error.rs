use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },

    #[error("vector bank {path}: {reason}")]
    Bank { path: PathBuf, reason: String },

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("rejected records (zero or degenerate vectors): {}", ids.join(", "))]
    DegenerateVectors { ids: Vec<String> },

    #[error("non-finite value in record {id}")]
    NonFinite { id: String },

    #[error("unknown ids: {}", ids.join(", "))]
    UnknownIds { ids: Vec<String> },

    #[error("backend `{backend}` does not support {capability}")]
    Unsupported {
        backend: String,
        capability: &'static str,
    },

    #[error("layer {layer} out of range (model has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("position {position} beyond prompt of {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("template must contain exactly {expected} placeholder tokens, found {found}")]
    Placeholder { expected: usize, found: usize },

    #[error("empty label")]
    EmptyLabel,

    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },

    #[error("frozen backend weights changed during training")]
    BackendMutated,

    #[error("oracle failed on trial {trial}: {reason}")]
    Oracle { trial: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown backend `{0}`")]
    UnknownBackend(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failure modes when reading an adapter checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("tensor section truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor section length {found} does not match declared shape ({expected} bytes)")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Filesystem path the error refers to, when there is one.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Checkpoint { path, .. }
            | Error::Bank { path, .. }
            | Error::Manifest { path, .. }
            | Error::Io { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Bank { .. } => "vector_bank",
            Error::Manifest { .. } => "manifest",
            Error::DegenerateVectors { .. } => "degenerate_vectors",
            Error::NonFinite { .. } => "non_finite",
            Error::UnknownIds { .. } => "unknown_ids",
            Error::Unsupported { .. } => "unsupported",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::PositionOutOfRange { .. } => "position_out_of_range",
            Error::Placeholder { .. } => "placeholder",
            Error::EmptyLabel => "empty_label",
            Error::NanLoss { .. } => "nan_loss",
            Error::BackendMutated => "backend_mutated",
            Error::Oracle { .. } => "oracle",
            Error::Shape(_) => "shape",
            Error::UnknownBackend(_) => "unknown_backend",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
