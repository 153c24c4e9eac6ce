//! Configuration, orchestration and reporting for the `kam` command.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod presets;

use std::path::PathBuf;

use kam_core::KamError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Kam(#[from] KamError),

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Kam(e) => e.kind(),
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
        }
    }

    /// Single-line JSON for standard error.
    pub fn to_json(&self) -> String {
        let mut value =
            serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        if let CliError::Config { field, .. } = self {
            value["error"]["field"] = serde_json::Value::String(field.clone());
        }
        value.to_string()
    }
}
