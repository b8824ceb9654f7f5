// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use probegraph_acquisition::retry::Backoff;
use probegraph_acquisition::service::HttpServiceConfig;
use probegraph_core::classifier::ClassifierConfig;
use probegraph_core::coherence::SparsityMode;
use probegraph_core::lexicon::{FunctionalVocabulary, DEFAULT_WINDOW};
use probegraph_core::metrics::CompletenessWeighting;

use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptBackendKind {
    Template,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptsConfig {
    pub backend: ConceptBackendKind,
    pub k: usize,
    /// Accept every proposed concept without review.
    pub auto_accept: bool,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        Self { backend: ConceptBackendKind::Template, k: 8, auto_accept: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Fixture,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub transport: Transport,
    /// Recorded responses for the fixture transport.
    pub fixtures: Option<PathBuf>,
    pub http: HttpServiceConfig,
    pub calls_per_hour: f64,
    pub burst: u32,
    pub backoff: Backoff,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            transport: Transport::Fixture,
            fixtures: None,
            http: HttpServiceConfig::default(),
            calls_per_hour: probegraph_acquisition::rate::DEFAULT_CALLS_PER_HOUR,
            burst: 1,
            backoff: Backoff::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedGrouping {
    pub method: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub baselines: bool,
    /// Cluster count for the baselines; defaults to the number of concept groups.
    pub n_clusters: Option<usize>,
    pub sparsity_mode: SparsityMode,
    pub weighting: CompletenessWeighting,
    /// Extra groupings read from grouping CSVs and scored alongside.
    pub groupings: Vec<RecordedGrouping>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            baselines: true,
            n_clusters: None,
            sparsity_mode: SparsityMode::default(),
            weighting: CompletenessWeighting::default(),
            groupings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Run config of the entity-swapped circuit.
    pub target: PathBuf,
    pub entity_map: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Graph JSON path or URL.
    pub graph: String,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Option<PathBuf>,
    #[serde(default)]
    pub concepts: ConceptsConfig,
    /// Probe frames; the built-in five when absent.
    #[serde(default)]
    pub probe_frames: Option<Vec<String>>,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
}

fn default_tau() -> f64 {
    0.8
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

/// A config plus the directory its relative paths are resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// Raw bytes of the config file, hashed into the manifest.
    pub raw: Vec<u8>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let config: RunConfig = serde_yaml::from_slice(&raw)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { config, base_dir, raw };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn from_config(config: RunConfig, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let raw = serde_yaml::to_string(&config)?.into_bytes();
        let loaded = Self { config, base_dir, raw };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        if !(0.0..=1.0).contains(&c.tau) {
            return Err(ConfigError::Invalid(format!("tau {} outside [0, 1]", c.tau)));
        }
        if c.window == 0 {
            return Err(ConfigError::Invalid("window must be at least 1".into()));
        }
        if c.run_id.is_empty() || c.run_id.contains(['/', '\\']) {
            return Err(ConfigError::Invalid(format!("bad run_id {:?}", c.run_id)));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Graph source with relative file paths resolved; URLs pass through.
    pub fn graph_source(&self) -> String {
        let g = &self.config.graph;
        if g.starts_with("http://") || g.starts_with("https://") {
            g.clone()
        } else {
            self.resolve(Path::new(g)).display().to_string()
        }
    }

    pub fn vocabulary(&self) -> Result<FunctionalVocabulary, ConfigError> {
        match &self.config.vocabulary {
            None => Ok(FunctionalVocabulary::english()),
            Some(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Read(path, e))?;
                FunctionalVocabulary::from_yaml_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    pub fn thresholds(&self) -> Result<ClassifierConfig, ConfigError> {
        match &self.config.thresholds {
            None => Ok(ClassifierConfig::default()),
            Some(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Read(path, e))?;
                ClassifierConfig::from_yaml_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    /// Bytes of every auxiliary config file, for the manifest.
    pub fn aux_files(&self) -> Vec<(String, PathBuf)> {
        let c = &self.config;
        let mut v = Vec::new();
        if let Some(p) = &c.vocabulary {
            v.push(("vocabulary".to_owned(), self.resolve(p)));
        }
        if let Some(p) = &c.thresholds {
            v.push(("thresholds".to_owned(), self.resolve(p)));
        }
        if let Some(t) = &c.transfer {
            v.push(("transfer_target".to_owned(), self.resolve(&t.target)));
            v.push(("entity_map".to_owned(), self.resolve(&t.entity_map)));
        }
        for g in &c.evaluate.groupings {
            v.push((format!("grouping:{}", g.method), self.resolve(&g.path)));
        }
        v
    }
}
