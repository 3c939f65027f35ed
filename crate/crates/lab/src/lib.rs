//! Experiment harness around the encoder/diagnostics core: configuration
//! parsing, depth sweeps, a synthetic warmup-free training task, CSV
//! emission, manifests and summary tables.

pub mod config;
pub mod csv_io;
pub mod harness;
pub mod manifest;
pub mod summary;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] dtfixup_core::CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("usage error: {0}")]
    Usage(String),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}
