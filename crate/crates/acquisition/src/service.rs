// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation services: recorded fixtures for offline runs and a
//! Neuronpedia-style HTTP client.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use probegraph_core::graph::{parse_graph, AttributionGraph, GraphFormat, NodeId};

use crate::error::AcquisitionError;
use crate::probes::ProbePrompt;
use crate::retry::Attempt;

/// What the service needs to locate a feature in its dictionary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub id: NodeId,
    pub layer: u32,
    pub feature_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationResponse {
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

/// A single failed call, classified for retry purposes.
#[derive(Debug, Clone, PartialEq)]
pub enum ServiceFault {
    RateLimited { retry_after: Option<Duration> },
    Timeout,
    Transient(String),
    Auth(String),
    Fatal(String),
    FixtureMiss { feature: String, probe: String },
    FixtureTextMismatch { feature: String, probe: String },
}

impl fmt::Display for ServiceFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServiceFault::RateLimited { .. } => write!(f, "429 rate limited"),
            ServiceFault::Timeout => write!(f, "timeout"),
            ServiceFault::Transient(m) => write!(f, "transient: {m}"),
            ServiceFault::Auth(m) => write!(f, "auth: {m}"),
            ServiceFault::Fatal(m) => write!(f, "fatal: {m}"),
            ServiceFault::FixtureMiss { feature, probe } => write!(f, "fixture miss {feature}/{probe}"),
            ServiceFault::FixtureTextMismatch { feature, probe } => {
                write!(f, "fixture text mismatch {feature}/{probe}")
            }
        }
    }
}

impl ServiceFault {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ServiceFault::RateLimited { .. } | ServiceFault::Timeout | ServiceFault::Transient(_))
    }

    pub fn into_error(self, attempts: Vec<Attempt>) -> AcquisitionError {
        match self {
            ServiceFault::RateLimited { .. } => AcquisitionError::RateLimitExceeded { attempts },
            ServiceFault::Auth(m) => AcquisitionError::Auth(m),
            ServiceFault::FixtureMiss { feature, probe } => AcquisitionError::FixtureMiss { feature, probe },
            ServiceFault::FixtureTextMismatch { feature, probe } => {
                AcquisitionError::FixtureTextMismatch { feature, probe }
            }
            other => AcquisitionError::Service { message: other.to_string(), attempts },
        }
    }
}

pub trait ActivationService: Send + Sync {
    fn fetch(&self, feature: &FeatureRef, probe: &ProbePrompt) -> Result<ActivationResponse, ServiceFault>;

    /// Whether calls should pass through the rate limiter.
    fn is_remote(&self) -> bool {
        true
    }
}

/// One recorded response inside a fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub text: String,
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

/// Fixture file layout: `<dir>/<feature_id>.json` mapping probe id to entry.
pub type FixtureFile = BTreeMap<String, FixtureEntry>;

pub fn fixture_path(dir: &Path, feature: &NodeId) -> PathBuf {
    dir.join(format!("{feature}.json"))
}

/// Offline transport replaying recorded responses.
pub struct FixtureService {
    dir: PathBuf,
    cache: Mutex<HashMap<NodeId, Option<FixtureFile>>>,
}

impl FixtureService {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), cache: Mutex::new(HashMap::new()) }
    }

    fn load(&self, id: &NodeId) -> Option<FixtureFile> {
        let mut cache = self.cache.lock().expect("poisoned");
        cache
            .entry(id.clone())
            .or_insert_with(|| {
                let text = std::fs::read_to_string(fixture_path(&self.dir, id)).ok()?;
                serde_json::from_str(&text).ok()
            })
            .clone()
    }
}

impl ActivationService for FixtureService {
    fn fetch(&self, feature: &FeatureRef, probe: &ProbePrompt) -> Result<ActivationResponse, ServiceFault> {
        let miss = || ServiceFault::FixtureMiss { feature: feature.id.to_string(), probe: probe.id.clone() };
        let file = self.load(&feature.id).ok_or_else(miss)?;
        let entry = file.get(&probe.id).ok_or_else(miss)?;
        if entry.text != probe.text {
            return Err(ServiceFault::FixtureTextMismatch { feature: feature.id.to_string(), probe: probe.id.clone() });
        }
        Ok(ActivationResponse { tokens: entry.tokens.clone(), values: entry.values.clone() })
    }

    fn is_remote(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpServiceConfig {
    pub base_url: String,
    pub model_id: String,
    /// Dictionary name appended to the layer, e.g. `clt-hp` gives `20-clt-hp`.
    pub source_set: String,
    pub timeout_ms: u64,
}

impl Default for HttpServiceConfig {
    fn default() -> Self {
        Self {
            base_url: "https://www.neuronpedia.org".into(),
            model_id: "gemma-2-2b".into(),
            source_set: "clt-hp".into(),
            timeout_ms: 30_000,
        }
    }
}

pub const API_KEY_ENV: &str = "NEURONPEDIA_API_KEY";

/// Client for a Neuronpedia-compatible `activation/new` endpoint.
pub struct HttpService {
    cfg: HttpServiceConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ActivationRequest<'a> {
    feature: FeatureSpec<'a>,
    #[serde(rename = "customText")]
    custom_text: &'a str,
}

#[derive(Serialize)]
struct FeatureSpec<'a> {
    #[serde(rename = "modelId")]
    model_id: &'a str,
    source: String,
    index: String,
}

impl HttpService {
    pub fn new(cfg: HttpServiceConfig, api_key: Option<String>) -> Result<Self, AcquisitionError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| AcquisitionError::BackendUnavailable(e.to_string()))?;
        Ok(Self { cfg, api_key, client })
    }

    pub fn from_env(cfg: HttpServiceConfig) -> Result<Self, AcquisitionError> {
        Self::new(cfg, std::env::var(API_KEY_ENV).ok())
    }
}

fn classify_status(status: reqwest::StatusCode, headers: &reqwest::header::HeaderMap, body: String) -> ServiceFault {
    match status.as_u16() {
        429 => ServiceFault::RateLimited {
            retry_after: headers
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|s| s.trim().parse::<u64>().ok())
                .map(Duration::from_secs),
        },
        401 | 403 => ServiceFault::Auth(format!("{status}: {body}")),
        408 => ServiceFault::Timeout,
        500..=599 => ServiceFault::Transient(format!("{status}: {body}")),
        _ => ServiceFault::Fatal(format!("{status}: {body}")),
    }
}

fn classify_transport(e: reqwest::Error) -> ServiceFault {
    if e.is_timeout() {
        ServiceFault::Timeout
    } else if e.is_connect() {
        ServiceFault::Transient(e.to_string())
    } else {
        ServiceFault::Fatal(e.to_string())
    }
}

impl ActivationService for HttpService {
    fn fetch(&self, feature: &FeatureRef, probe: &ProbePrompt) -> Result<ActivationResponse, ServiceFault> {
        let url = format!("{}/api/activation/new", self.cfg.base_url.trim_end_matches('/'));
        let body = ActivationRequest {
            feature: FeatureSpec {
                model_id: &self.cfg.model_id,
                source: format!("{}-{}", feature.layer, self.cfg.source_set),
                index: feature.feature_index.to_string(),
            },
            custom_text: &probe.text,
        };
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.header("x-api-key", key);
        }
        tracing::debug!(%url, feature = %feature.id, probe = %probe.id, "activation request");
        let resp = req.send().map_err(classify_transport)?;
        let status = resp.status();
        if !status.is_success() {
            let headers = resp.headers().clone();
            let text = resp.text().unwrap_or_default();
            return Err(classify_status(status, &headers, text));
        }
        let parsed: ActivationResponse =
            resp.json().map_err(|e| ServiceFault::Fatal(format!("bad response body: {e}")))?;
        if parsed.tokens.len() != parsed.values.len() {
            return Err(ServiceFault::Fatal(format!(
                "{} tokens but {} values",
                parsed.tokens.len(),
                parsed.values.len()
            )));
        }
        Ok(parsed)
    }
}

/// Load a graph from a local path or an http(s) URL.
pub fn fetch_graph(source: &str) -> Result<(AttributionGraph, Vec<u8>), AcquisitionError> {
    let bytes = if source.starts_with("http://") || source.starts_with("https://") {
        let resp = reqwest::blocking::get(source).map_err(|e| AcquisitionError::BackendUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(AcquisitionError::Service {
                message: format!("graph download failed: {}", resp.status()),
                attempts: Vec::new(),
            });
        }
        resp.bytes().map_err(|e| AcquisitionError::BackendUnavailable(e.to_string()))?.to_vec()
    } else {
        std::fs::read(source)?
    };
    let graph = parse_graph(&bytes, GraphFormat::Json)?;
    Ok((graph, bytes))
}
