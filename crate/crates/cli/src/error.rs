// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("config: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("config: {0}")]
    Invalid(String),
}

/// A pipeline stage could not run or failed while running.
#[derive(Debug, Error)]
#[error("stage {stage} failed: {cause}")]
pub struct StageFailure {
    pub stage: String,
    pub cause: String,
    /// Upstream artifacts missing or stale, as opposed to a failure while running.
    pub precondition: bool,
}

impl StageFailure {
    pub fn new(stage: impl Into<String>, cause: impl ToString) -> Self {
        Self { stage: stage.into(), cause: cause.to_string(), precondition: false }
    }

    pub fn precondition(stage: impl Into<String>, cause: impl ToString) -> Self {
        Self { precondition: true, ..Self::new(stage, cause) }
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port in use: {0}")]
    PortInUse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
