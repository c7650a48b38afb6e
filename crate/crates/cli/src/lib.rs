//! Command implementations behind the `selfie` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod plot;

use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] selfie_core::Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Image { .. } => "image",
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            CliError::Core(e) => e.path(),
            CliError::Config { path, .. } | CliError::Io { path, .. } | CliError::Image { path, .. } => Some(path),
            CliError::Usage(_) => None,
        }
    }

    /// Process exit code: 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Contents of error.json.
#[derive(Debug, Serialize)]
pub struct ErrorReport<'a> {
    pub error: &'a str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<&'a Path>,
}

/// Write `error.json` into `dir` (created if needed).
pub fn write_error(dir: &Path, err: &CliError) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let report = ErrorReport {
        error: err.kind(),
        message: err.to_string(),
        path: err.path(),
    };
    let p = dir.join("error.json");
    let text = serde_json::to_string_pretty(&report).map_err(std::io::Error::other)? + "\n";
    std::fs::write(&p, text)?;
    Ok(p)
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(selfie_core::Error::from)? + "\n";
    write_file(path, text)
}
