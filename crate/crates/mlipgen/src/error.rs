use std::path::Path;

use serde_json::{json, Value};

/// Exit status for a failed stage.
pub const EXIT_STAGE: i32 = 1;
/// Exit status for an unreadable or invalid configuration.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: mlipgen_core::Error,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{stage} failed: {message}")]
    Check { stage: &'static str, message: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: err.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            _ => EXIT_STAGE,
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> Value {
        let body = match self {
            CliError::Config { key, message } => json!({ "kind": "config", "key": key, "message": message }),
            CliError::Stage { stage, source } => json!({
                "kind": "stage",
                "stage": stage,
                "error": core_error_kind(source),
                "message": source.to_string(),
            }),
            CliError::Io { path, message } => json!({ "kind": "io", "path": path, "message": message }),
            CliError::Check { stage, message } => json!({ "kind": "stage", "stage": stage, "message": message }),
        };
        json!({ "error": body, "exit_code": self.exit_code() })
    }
}

/// Variant name of a core error, e.g. `NotConverged`.
pub fn core_error_kind(e: &mlipgen_core::Error) -> String {
    let s = format!("{e:?}");
    s.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_string()
}

/// Attaches a stage name to core results.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for mlipgen_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
