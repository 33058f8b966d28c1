//! Experiment runner: synthesis, curriculum training, evaluation, schedule
//! and geodesic inspection. Every command writes JSON/CSV artifacts.

use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{RunConfig, Strategy, Variant};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] occl_core::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(occl_core::Error::ShootingFailed { .. }) => "shooting_failed",
            CliError::Core(_) => "core",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
        }
    }

    /// Machine-readable error record printed on failure.
    pub fn record(&self) -> ErrorRecord {
        let residual = match self {
            CliError::Core(occl_core::Error::ShootingFailed { residual, .. }) => Some(*residual),
            _ => None,
        };
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            residual,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

pub type CliResult<T> = Result<T, CliError>;
