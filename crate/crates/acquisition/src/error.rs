// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

use crate::retry::Attempt;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("concept backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("missing or rejected credentials: {0}")]
    Auth(String),
    #[error("no accepted concepts")]
    EmptyAcceptedSet,
    #[error("probe templates: {0}")]
    InvalidTemplates(String),
    #[error("rate limited after {} attempts", attempts.len())]
    RateLimitExceeded { attempts: Vec<Attempt> },
    #[error("service error after {} attempts: {message}", attempts.len())]
    Service { message: String, attempts: Vec<Attempt> },
    #[error("no fixture for feature `{feature}` probe `{probe}`")]
    FixtureMiss { feature: String, probe: String },
    #[error("fixture for feature `{feature}` probe `{probe}` was recorded for different text")]
    FixtureTextMismatch { feature: String, probe: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] probegraph_core::error::GraphError),
}
