// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage orchestration over a run directory.
//!
//! Each stage reads named artifacts, writes its own, and records input,
//! output and parameter digests in the manifest. A stage is fresh when its
//! record matches what is on disk and every upstream stage is fresh.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use probegraph_acquisition::concepts::{generate_concepts, Concept, ConceptBackend, LlmBackend, TemplateBackend};
use probegraph_acquisition::ledger::{atomic_write, CheckpointLedger};
use probegraph_acquisition::measure::{load_artifacts, measure_activations, MeasureOptions};
use probegraph_acquisition::probes::{seed_probe, synthesize_probes, ProbePrompt, ProbeTemplates};
use probegraph_acquisition::rate::{RateLimiter, SystemClock};
use probegraph_acquisition::retry::{Sleeper, ThreadSleeper};
use probegraph_acquisition::service::{fetch_graph, ActivationService, FeatureRef, FixtureService, HttpService};
use probegraph_core::classifier::{summarize, write_grouping_csv, Classification, Supernode};
use probegraph_core::graph::{parse_graph, AttributionGraph, GraphFormat, NodeId};
use probegraph_core::io::{
    read_activations_csv, read_grouping_csv, supernodes_from_rows, write_baseline_grouping_csv, write_evaluation_csv,
    write_raw_activations_csv, write_signatures_csv, RawActivation,
};
use probegraph_core::metrics::{score_graph, PinnedSubgraph, SubgraphExport};
use probegraph_core::selection::select_nodes_by_cumulative_influence;
use probegraph_core::signatures::Signature;
use probegraph_core::transfer::{analyze_transfer, supernode_heatmap, EntityMap, MatchResult, TransferReport};

use crate::analysis;
use crate::config::{ConceptBackendKind, LoadedConfig, Transport};
use crate::error::StageFailure;
use crate::manifest::{digest_file, digest_value, sha256_hex, RunManifest, StageRecord, MANIFEST_FILE};

pub const GRAPH: &str = "graph.json";
pub const SELECTED: &str = "selected_features.json";
pub const CURVE: &str = "influence_curve.csv";
pub const CONCEPTS: &str = "concepts.json";
pub const PROMPTS: &str = "prompts.json";
pub const ACTIVATIONS: &str = "activations.csv";
pub const SIGNATURES: &str = "signatures.json";
pub const SIGNATURES_CSV: &str = "signatures.csv";
pub const SUPERNODES: &str = "supernodes.json";
pub const GROUPING: &str = "grouping.csv";
pub const GROUPING_SUMMARY: &str = "grouping_summary.json";
pub const SUBGRAPH: &str = "subgraph.json";
pub const EVALUATION: &str = "evaluation.csv";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const TRANSFER_REPORT: &str = "transfer_report.json";
pub const TRANSFER_HEATMAP: &str = "transfer_heatmap.csv";
pub const LEDGER: &str = "ledger.ndjson";
pub const ARTIFACTS: &str = "artifacts";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GraphFetch,
    Select,
    Concepts,
    Probes,
    Measure,
    Signatures,
    Classify,
    Subgraph,
    Evaluate,
    Transfer,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GraphFetch,
        Stage::Select,
        Stage::Concepts,
        Stage::Probes,
        Stage::Measure,
        Stage::Signatures,
        Stage::Classify,
        Stage::Subgraph,
        Stage::Evaluate,
        Stage::Transfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GraphFetch => "graph-fetch",
            Stage::Select => "select",
            Stage::Concepts => "concepts",
            Stage::Probes => "probes",
            Stage::Measure => "measure",
            Stage::Signatures => "signatures",
            Stage::Classify => "classify",
            Stage::Subgraph => "subgraph",
            Stage::Evaluate => "evaluate",
            Stage::Transfer => "transfer",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GraphFetch => &[],
            Stage::Select | Stage::Concepts => &[Stage::GraphFetch],
            Stage::Probes => &[Stage::GraphFetch, Stage::Concepts],
            Stage::Measure => &[Stage::GraphFetch, Stage::Select, Stage::Probes],
            Stage::Signatures => &[Stage::GraphFetch, Stage::Measure],
            Stage::Classify => &[Stage::GraphFetch, Stage::Measure, Stage::Signatures],
            Stage::Subgraph => &[Stage::GraphFetch, Stage::Classify],
            Stage::Evaluate => &[Stage::GraphFetch, Stage::Measure, Stage::Signatures, Stage::Classify],
            Stage::Transfer => &[Stage::GraphFetch, Stage::Probes, Stage::Measure, Stage::Classify],
        }
    }

    /// Artifacts the stage reads.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::GraphFetch => &[],
            Stage::Select | Stage::Concepts => &[GRAPH],
            Stage::Probes => &[GRAPH, CONCEPTS],
            Stage::Measure => &[GRAPH, SELECTED, PROMPTS],
            Stage::Signatures => &[GRAPH, ACTIVATIONS],
            Stage::Classify => &[GRAPH, ACTIVATIONS, SIGNATURES],
            Stage::Subgraph => &[GRAPH, SUPERNODES],
            Stage::Evaluate => &[GRAPH, ACTIVATIONS, SIGNATURES, SUPERNODES],
            Stage::Transfer => &[GRAPH, PROMPTS, ACTIVATIONS, SUPERNODES],
        }
    }

    /// Every stage strictly downstream, in pipeline order.
    pub fn downstream(self) -> Vec<Stage> {
        let mut set = BTreeSet::from([self]);
        for s in Stage::ALL {
            if s.upstream().iter().any(|u| set.contains(u)) {
                set.insert(s);
            }
        }
        set.remove(&self);
        set.into_iter().collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Logical artifact name used in error messages, e.g. `signatures`.
fn artifact_label(file: &str) -> &str {
    file.split('.').next().unwrap_or(file)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum StageStatus {
    Fresh,
    Stale(String),
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeatures {
    pub tau: f64,
    pub n_selected: usize,
    pub n_features: usize,
    /// Cumulative influence fraction reached by the last selected feature.
    pub cumulative_fraction: f64,
    pub selected: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingSource {
    Classifier,
    HumanOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernodeFile {
    pub source: GroupingSource,
    pub supernodes: Vec<Supernode>,
    pub classifications: Vec<Classification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub results: BTreeMap<String, probegraph_core::coherence::GroupingEvaluation>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFile {
    pub target_run_id: String,
    pub matches: MatchResult,
    pub report: TransferReport,
    pub target_supernodes: Vec<Supernode>,
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

/// Replace whole words of `text` through the entity map, keeping punctuation.
pub fn swap_entities(text: &str, map: &EntityMap) -> String {
    text.split(' ')
        .map(|w| {
            let start = w.find(|c: char| c.is_alphanumeric()).unwrap_or(w.len());
            let end = w.rfind(|c: char| c.is_alphanumeric()).map_or(start, |i| i + 1);
            match map.swaps.get(&w[start..end]) {
                Some(to) if start < end => format!("{}{}{}", &w[..start], to, &w[end..]),
                _ => w.to_owned(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

type StageResult<T> = Result<T, StageFailure>;

pub struct Pipeline {
    pub cfg: LoadedConfig,
    pub dir: PathBuf,
    manifest: RunManifest,
    service: Option<Arc<dyn ActivationService>>,
    sleeper: Arc<dyn Sleeper>,
}

impl Pipeline {
    pub fn open(cfg: LoadedConfig, dir: impl Into<PathBuf>) -> StageResult<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| StageFailure::new("setup", e))?;
        let manifest = RunManifest::load(&dir).unwrap_or_else(|| RunManifest::new(&cfg.config.run_id));
        let mut p = Self { cfg, dir, manifest, service: None, sleeper: Arc::new(ThreadSleeper) };
        p.manifest.run_id = p.cfg.config.run_id.clone();
        p.refresh_inputs();
        p.save_manifest().map_err(|e| StageFailure::new("setup", e))?;
        Ok(p)
    }

    /// Use this activation service instead of the configured transport.
    pub fn with_service(mut self, service: Arc<dyn ActivationService>) -> Self {
        self.service = Some(service);
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    fn refresh_inputs(&mut self) {
        let mut inputs = BTreeMap::new();
        inputs.insert("config".to_owned(), sha256_hex(&self.cfg.raw));
        for (name, path) in self.cfg.aux_files() {
            inputs.insert(name, digest_file(&path).unwrap_or_else(|| "missing".into()));
        }
        self.manifest.inputs = inputs;
    }

    fn save_manifest(&self) -> std::io::Result<()> {
        atomic_write(&self.dir.join(MANIFEST_FILE), &self.manifest.to_bytes())
            .map_err(|e| std::io::Error::other(e.to_string()))
    }

    /// Swap in an edited config (e.g. a new threshold); stage parameters are
    /// re-derived from it.
    pub fn set_config(&mut self, cfg: LoadedConfig) -> std::io::Result<()> {
        self.cfg = cfg;
        self.refresh_inputs();
        self.save_manifest()
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        stage != Stage::Transfer || self.cfg.config.transfer.is_some()
    }

    fn params(&self, stage: Stage) -> StageResult<String> {
        let c = &self.cfg.config;
        let fail = |e: crate::error::ConfigError| StageFailure::new(stage.name(), e);
        let v = match stage {
            Stage::GraphFetch => {
                let src = self.cfg.graph_source();
                let content = if src.starts_with("http") { None } else { digest_file(Path::new(&src)) };
                serde_json::json!({"graph": c.graph, "content": content})
            }
            Stage::Select => serde_json::json!({"tau": c.tau}),
            Stage::Concepts => serde_json::to_value(&c.concepts).expect("serializable"),
            Stage::Probes => serde_json::json!({"frames": c.probe_frames}),
            Stage::Measure => serde_json::json!({
                "transport": c.measure.transport,
                "fixtures": c.measure.fixtures,
                "base_url": c.measure.http.base_url,
                "model_id": c.measure.http.model_id,
                "source_set": c.measure.http.source_set,
            }),
            Stage::Signatures => serde_json::json!({
                "window": c.window,
                "vocabulary": digest_value(&self.cfg.vocabulary().map_err(fail)?),
            }),
            Stage::Classify => serde_json::json!({
                "window": c.window,
                "vocabulary": digest_value(&self.cfg.vocabulary().map_err(fail)?),
                "thresholds": digest_value(&self.cfg.thresholds().map_err(fail)?),
            }),
            Stage::Subgraph => serde_json::json!({"weighting": c.evaluate.weighting}),
            Stage::Evaluate => {
                let files: Vec<Option<String>> =
                    c.evaluate.groupings.iter().map(|g| digest_file(&self.cfg.resolve(&g.path))).collect();
                serde_json::json!({"evaluate": c.evaluate, "files": files})
            }
            Stage::Transfer => match &c.transfer {
                None => serde_json::Value::Null,
                Some(t) => {
                    let target = self.cfg.resolve(&t.target);
                    let fixtures = LoadedConfig::load(&target)
                        .ok()
                        .and_then(|tc| tc.config.measure.fixtures.clone().map(|f| tc.resolve(&f)))
                        .map(|d| d.display().to_string());
                    serde_json::json!({
                        "target": digest_file(&target),
                        "target_fixtures": fixtures,
                        "entity_map": digest_file(&self.cfg.resolve(&t.entity_map)),
                    })
                }
            },
        };
        Ok(digest_value(&v))
    }

    fn own_status(&self, stage: Stage) -> StageStatus {
        let Some(rec) = self.manifest.stages.get(stage.name()) else {
            return StageStatus::NotRun;
        };
        if !rec.complete {
            return StageStatus::NotRun;
        }
        match self.params(stage) {
            Ok(p) if p == rec.params => {}
            _ => return StageStatus::Stale("configuration changed".into()),
        }
        for (name, digest) in rec.inputs.iter().chain(&rec.outputs) {
            if digest_file(&self.path(name)).as_deref() != Some(digest.as_str()) {
                return StageStatus::Stale(format!("{name} changed"));
            }
        }
        StageStatus::Fresh
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        for &u in stage.upstream() {
            match self.status(u) {
                StageStatus::Fresh => {}
                StageStatus::NotRun => return StageStatus::Stale(format!("{u} has not run")),
                StageStatus::Stale(_) => return StageStatus::Stale(format!("{u} is stale")),
            }
        }
        self.own_status(stage)
    }

    pub fn statuses(&self) -> BTreeMap<String, StageStatus> {
        Stage::ALL.into_iter().filter(|s| self.enabled(*s)).map(|s| (s.name().to_owned(), self.status(s))).collect()
    }

    fn check_ready(&self, stage: Stage) -> StageResult<()> {
        // Nearest prerequisite first: classify before measure reports signatures.
        for f in stage.inputs().iter().rev() {
            if !self.path(f).exists() {
                return Err(StageFailure::precondition(stage.name(), format!("{} missing", artifact_label(f))));
            }
        }
        for &u in stage.upstream() {
            match self.status(u) {
                StageStatus::Fresh => {}
                StageStatus::NotRun => {
                    return Err(StageFailure::precondition(stage.name(), format!("{u} has not run")))
                }
                StageStatus::Stale(why) => {
                    return Err(StageFailure::precondition(stage.name(), format!("{u} is stale ({why})")))
                }
            }
        }
        Ok(())
    }

    fn write(&self, stage: Stage, name: &str, bytes: &[u8]) -> StageResult<()> {
        atomic_write(&self.path(name), bytes).map_err(|e| StageFailure::new(stage.name(), e))
    }

    fn read(&self, stage: Stage, name: &str) -> StageResult<Vec<u8>> {
        std::fs::read(self.path(name))
            .map_err(|_| StageFailure::precondition(stage.name(), format!("{} missing", artifact_label(name))))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, stage: Stage, name: &str) -> StageResult<T> {
        let b = self.read(stage, name)?;
        serde_json::from_slice(&b).map_err(|e| StageFailure::new(stage.name(), format!("{name}: {e}")))
    }

    fn graph(&self, stage: Stage) -> StageResult<AttributionGraph> {
        let b = self.read(stage, GRAPH)?;
        parse_graph(&b, GraphFormat::Json).map_err(|e| StageFailure::new(stage.name(), e))
    }

    fn raw_activations(&self, stage: Stage) -> StageResult<Vec<RawActivation>> {
        let b = self.read(stage, ACTIVATIONS)?;
        read_activations_csv(b.as_slice()).map_err(|e| StageFailure::new(stage.name(), e))
    }

    fn record(&mut self, stage: Stage, outputs: &[&str]) -> StageResult<()> {
        let digest = |name: &str| {
            digest_file(&self.path(name)).ok_or_else(|| StageFailure::new(stage.name(), format!("{name} not written")))
        };
        let inputs = stage
            .inputs()
            .iter()
            .map(|n| Ok(((*n).to_owned(), digest(n)?)))
            .collect::<StageResult<BTreeMap<_, _>>>()?;
        let outputs =
            outputs.iter().map(|n| Ok(((*n).to_owned(), digest(n)?))).collect::<StageResult<BTreeMap<_, _>>>()?;
        let rec = StageRecord { complete: true, params: self.params(stage)?, inputs, outputs };
        self.manifest.stages.insert(stage.name().to_owned(), rec);
        self.save_manifest().map_err(|e| StageFailure::new(stage.name(), e))
    }

    /// Overwrite a completed stage's outputs with edited content (reviewed
    /// concepts, manual regrouping). Downstream stages become stale.
    pub fn replace_outputs(&mut self, stage: Stage, files: &[(&str, Vec<u8>)]) -> StageResult<()> {
        if self.own_status(stage) == StageStatus::NotRun {
            return Err(StageFailure::precondition(stage.name(), "stage has not run"));
        }
        for (name, bytes) in files {
            self.write(stage, name, bytes)?;
        }
        let rec = self.manifest.stages.get_mut(stage.name()).expect("checked");
        for (name, _) in files {
            let d = digest_file(&self.dir.join(name)).unwrap_or_default();
            rec.outputs.insert((*name).to_owned(), d);
        }
        self.save_manifest().map_err(|e| StageFailure::new(stage.name(), e))
    }

    pub fn run(&mut self, stage: Stage) -> StageResult<()> {
        if !self.enabled(stage) {
            return Err(StageFailure::precondition(stage.name(), "no transfer target configured"));
        }
        self.check_ready(stage)?;
        tracing::info!(stage = stage.name(), "running");
        // A failed stage must not look complete.
        if let Some(r) = self.manifest.stages.get_mut(stage.name()) {
            r.complete = false;
        }
        let outputs = match stage {
            Stage::GraphFetch => self.graph_fetch()?,
            Stage::Select => self.select()?,
            Stage::Concepts => self.concepts()?,
            Stage::Probes => self.probes()?,
            Stage::Measure => self.measure()?,
            Stage::Signatures => self.signatures()?,
            Stage::Classify => self.classify()?,
            Stage::Subgraph => self.subgraph()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Transfer => self.transfer()?,
        };
        let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.record(stage, &names)
    }

    /// Run every enabled stage that is not fresh, in order.
    pub fn run_all(&mut self, force: bool) -> StageResult<Vec<Stage>> {
        let mut ran = Vec::new();
        let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| self.enabled(*s)).collect();
        for stage in stages {
            if force || self.status(stage) != StageStatus::Fresh {
                self.run(stage)?;
                ran.push(stage);
            } else {
                tracing::info!(stage = stage.name(), "fresh, skipped");
            }
        }
        Ok(ran)
    }

    // Stage bodies. Each returns the artifact names it produced.

    fn graph_fetch(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::GraphFetch;
        let (_, bytes) = fetch_graph(&self.cfg.graph_source()).map_err(|e| StageFailure::new(st.name(), e))?;
        self.write(st, GRAPH, &bytes)?;
        Ok(vec![GRAPH.into()])
    }

    fn select(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Select;
        let g = self.graph(st)?;
        let sel = select_nodes_by_cumulative_influence(&g, self.cfg.config.tau)
            .map_err(|e| StageFailure::new(st.name(), e))?;
        let out = SelectedFeatures {
            tau: sel.tau,
            n_selected: sel.selected.len(),
            n_features: sel.cumulative_curve.len(),
            cumulative_fraction: sel.cumulative_curve[sel.selected.len() - 1].cumulative_fraction,
            selected: sel.selected.clone(),
        };
        let mut curve = Vec::new();
        sel.write_curve_csv(&mut curve).map_err(|e| StageFailure::new(st.name(), e))?;
        self.write(st, SELECTED, &json_bytes(&out))?;
        self.write(st, CURVE, &curve)?;
        Ok(vec![SELECTED.into(), CURVE.into()])
    }

    fn concepts(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Concepts;
        let g = self.graph(st)?;
        let vocab = self.cfg.vocabulary().map_err(|e| StageFailure::new(st.name(), e))?;
        let c = &self.cfg.config.concepts;
        let backend: Box<dyn ConceptBackend> = match c.backend {
            ConceptBackendKind::Template => Box::new(TemplateBackend { vocab }),
            ConceptBackendKind::Llm => Box::new(LlmBackend::from_env()),
        };
        let mut concepts = generate_concepts(&g.header().prompt_tokens, c.k, backend.as_ref())
            .map_err(|e| StageFailure::new(st.name(), e))?;
        if c.auto_accept {
            concepts.iter_mut().for_each(|c| c.accepted = true);
        }
        self.write(st, CONCEPTS, &json_bytes(&concepts))?;
        Ok(vec![CONCEPTS.into()])
    }

    fn templates(&self) -> ProbeTemplates {
        match &self.cfg.config.probe_frames {
            Some(f) => ProbeTemplates { frames: f.clone() },
            None => ProbeTemplates::default(),
        }
    }

    fn probes(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Probes;
        let g = self.graph(st)?;
        let concepts: Vec<Concept> = self.read_json(st, CONCEPTS)?;
        let h = g.header();
        let probes = synthesize_probes(&concepts, &h.prompt_text(), h.target_logit.trim(), &self.templates())
            .map_err(|e| StageFailure::new(st.name(), e))?;
        self.write(st, PROMPTS, &json_bytes(&probes))?;
        Ok(vec![PROMPTS.into()])
    }

    fn service_for(&self, stage: Stage, cfg: &LoadedConfig) -> StageResult<Arc<dyn ActivationService>> {
        if let Some(s) = &self.service {
            return Ok(Arc::clone(s));
        }
        let m = &cfg.config.measure;
        match m.transport {
            Transport::Fixture => {
                let dir = m
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| StageFailure::new(stage.name(), "fixture transport needs `fixtures`"))?;
                Ok(Arc::new(FixtureService::new(cfg.resolve(dir))))
            }
            Transport::Http => {
                Ok(Arc::new(HttpService::from_env(m.http.clone()).map_err(|e| StageFailure::new(stage.name(), e))?))
            }
        }
    }

    fn feature_refs(stage: Stage, g: &AttributionGraph, ids: &[NodeId]) -> StageResult<Vec<FeatureRef>> {
        ids.iter()
            .map(|id| {
                let n = g.node(id).ok_or_else(|| StageFailure::new(stage.name(), format!("unknown feature {id}")))?;
                match (n.layer, n.feature_index) {
                    (Some(layer), Some(feature_index)) => Ok(FeatureRef { id: id.clone(), layer, feature_index }),
                    _ => Err(StageFailure::new(stage.name(), format!("{id} is not a feature"))),
                }
            })
            .collect()
    }

    fn run_measure(
        &self,
        stage: Stage,
        cfg: &LoadedConfig,
        features: &[FeatureRef],
        probes: &[ProbePrompt],
        subdir: &Path,
    ) -> StageResult<Vec<RawActivation>> {
        let service = self.service_for(stage, cfg)?;
        let fail = |e: probegraph_acquisition::AcquisitionError| StageFailure::new(stage.name(), e);
        let mut ledger = CheckpointLedger::open(subdir.join(LEDGER), &cfg.config.run_id).map_err(fail)?;
        let clock = SystemClock::default();
        let limiter = RateLimiter::new(cfg.config.measure.calls_per_hour, cfg.config.measure.burst, &clock);
        let opts = MeasureOptions {
            backoff: cfg.config.measure.backoff,
            sleeper: self.sleeper.as_ref(),
            limiter: Some((&limiter, &clock)),
        };
        let artifacts = subdir.join(ARTIFACTS);
        let report =
            measure_activations(features, probes, service.as_ref(), &mut ledger, &artifacts, &opts).map_err(fail)?;
        tracing::info!(
            scheduled = report.scheduled,
            fetched = report.fetched,
            skipped = report.skipped,
            reconciled = report.reconciled,
            "measurement done"
        );
        for (f, p, attempts) in &report.attempts {
            for a in attempts {
                tracing::debug!(feature = %f, probe = %p, attempt = a.index, outcome = %a.outcome, delay_ms = ?a.delay_ms, "service call");
            }
        }
        load_artifacts(features, probes, &artifacts).map_err(fail)
    }

    fn measure(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Measure;
        let g = self.graph(st)?;
        let sel: SelectedFeatures = self.read_json(st, SELECTED)?;
        let prompts: Vec<ProbePrompt> = self.read_json(st, PROMPTS)?;
        let features = Self::feature_refs(st, &g, &sel.selected)?;
        let mut probes = vec![seed_probe(&g.header().prompt_text())];
        probes.extend(prompts);
        let raw = self.run_measure(st, &self.cfg.clone(), &features, &probes, &self.dir.clone())?;
        let mut csv = Vec::new();
        write_raw_activations_csv(&raw, &mut csv).map_err(|e| StageFailure::new(st.name(), e))?;
        self.write(st, ACTIVATIONS, &csv)?;
        Ok(vec![ACTIVATIONS.into()])
    }

    fn signatures(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Signatures;
        let fail = |e: anyhow::Error| StageFailure::new(st.name(), e);
        let g = self.graph(st)?;
        let raw = self.raw_activations(st)?;
        let vocab = self.cfg.vocabulary().map_err(|e| StageFailure::new(st.name(), e))?;
        let records = analysis::build_records(&raw).map_err(fail)?;
        let sigs = analysis::build_signatures(&g, &records, &vocab, self.cfg.config.window).map_err(fail)?;
        let mut csv = Vec::new();
        write_signatures_csv(&sigs, &mut csv).map_err(|e| StageFailure::new(st.name(), e))?;
        self.write(st, SIGNATURES, &json_bytes(&sigs))?;
        self.write(st, SIGNATURES_CSV, &csv)?;
        Ok(vec![SIGNATURES.into(), SIGNATURES_CSV.into()])
    }

    fn classify(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Classify;
        let fail = |e: anyhow::Error| StageFailure::new(st.name(), e);
        let g = self.graph(st)?;
        let sigs: Vec<Signature> = self.read_json(st, SIGNATURES)?;
        let raw = self.raw_activations(st)?;
        let records = analysis::build_records(&raw).map_err(fail)?;
        let vocab = self.cfg.vocabulary().map_err(|e| StageFailure::new(st.name(), e))?;
        let thresholds = self.cfg.thresholds().map_err(|e| StageFailure::new(st.name(), e))?;
        let classified = analysis::classify_all(&sigs, g.header().n_layers, &thresholds);
        let supernodes = analysis::supernodes(&classified, &records, &vocab);
        let classifications: Vec<Classification> = classified.into_iter().map(|(_, c)| c).collect();
        self.write_grouping(st, GroupingSource::Classifier, supernodes, classifications)?;
        Ok(vec![SUPERNODES.into(), GROUPING.into(), GROUPING_SUMMARY.into()])
    }

    /// Grouping artifacts for a classifier run or a manual override.
    pub fn grouping_files(
        source: GroupingSource,
        supernodes: Vec<Supernode>,
        mut classifications: Vec<Classification>,
    ) -> StageResult<Vec<(&'static str, Vec<u8>)>> {
        if source == GroupingSource::HumanOverride {
            for c in &mut classifications {
                c.trace.reason = "human-override".into();
            }
        }
        let mut csv = Vec::new();
        write_grouping_csv(&classifications, &supernodes, &mut csv)
            .map_err(|e| StageFailure::new(Stage::Classify.name(), e))?;
        let summary = serde_json::json!({
            "source": source,
            "n_features": classifications.len(),
            "n_supernodes": supernodes.len(),
            "n_grouped": supernodes.iter().map(|s| s.members.len()).sum::<usize>(),
            "categories": summarize(&classifications),
        });
        let file = SupernodeFile { source, supernodes, classifications };
        Ok(vec![(SUPERNODES, json_bytes(&file)), (GROUPING, csv), (GROUPING_SUMMARY, json_bytes(&summary))])
    }

    fn write_grouping(
        &self,
        st: Stage,
        source: GroupingSource,
        supernodes: Vec<Supernode>,
        classifications: Vec<Classification>,
    ) -> StageResult<()> {
        for (name, bytes) in Self::grouping_files(source, supernodes, classifications)? {
            self.write(st, name, &bytes)?;
        }
        Ok(())
    }

    fn subgraph(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Subgraph;
        let fail = |e: probegraph_core::error::MetricsError| StageFailure::new(st.name(), e);
        let g = self.graph(st)?;
        let file: SupernodeFile = self.read_json(st, SUPERNODES)?;
        let w = self.cfg.config.evaluate.weighting;
        let pinned = PinnedSubgraph::from_supernodes(&g, &file.supernodes).map_err(fail)?;
        let full = score_graph(&g, &PinnedSubgraph::all_features(&g), w).map_err(fail)?;
        let sub = score_graph(&g, &pinned, w).map_err(fail)?;
        let export = SubgraphExport::new(&g, &pinned, &file.supernodes, full, sub);
        self.write(st, SUBGRAPH, &json_bytes(&export))?;
        Ok(vec![SUBGRAPH.into()])
    }

    fn evaluate(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Evaluate;
        let fail = |e: anyhow::Error| StageFailure::new(st.name(), e);
        let g = self.graph(st)?;
        let sigs: Vec<Signature> = self.read_json(st, SIGNATURES)?;
        let file: SupernodeFile = self.read_json(st, SUPERNODES)?;
        let raw = self.raw_activations(st)?;
        let records = analysis::build_records(&raw).map_err(fail)?;
        let profiles = analysis::profiles(&g, &sigs, &records);
        let seeds = analysis::seed_vectors(&raw);
        let mut recorded = Vec::new();
        for rg in &self.cfg.config.evaluate.groupings {
            let path = self.cfg.resolve(&rg.path);
            let f = std::fs::File::open(&path)
                .map_err(|e| StageFailure::new(st.name(), format!("{}: {e}", path.display())))?;
            let rows = read_grouping_csv(f).map_err(|e| StageFailure::new(st.name(), e))?;
            let groups = supernodes_from_rows(&rows).into_iter().map(|s| s.members).collect();
            recorded.push((rg.method.clone(), groups));
        }
        let run = analysis::evaluate(&file.supernodes, &profiles, &seeds, recorded, &self.cfg.config.evaluate)
            .map_err(fail)?;
        let mut outputs = vec![EVALUATION.to_owned(), EVALUATION_JSON.to_owned()];
        let layers: BTreeMap<NodeId, u32> = sigs.iter().map(|s| (s.feature.clone(), s.layer)).collect();
        let mut warnings = Vec::new();
        for (method, clustering) in &run.baselines {
            let name = format!("grouping_{}.csv", method.tag().trim_start_matches("baseline:"));
            let mut csv = Vec::new();
            write_baseline_grouping_csv(*method, clustering, &layers, &mut csv)
                .map_err(|e| StageFailure::new(st.name(), e))?;
            self.write(st, &name, &csv)?;
            warnings.extend(clustering.warnings.iter().map(|w| format!("{}: {w}", method.tag())));
            outputs.push(name);
        }
        let mut csv = Vec::new();
        write_evaluation_csv(&run.results, &mut csv).map_err(|e| StageFailure::new(st.name(), e))?;
        self.write(st, EVALUATION, &csv)?;
        let ef = EvaluationFile { results: run.results.into_iter().collect(), warnings };
        self.write(st, EVALUATION_JSON, &json_bytes(&ef))?;
        Ok(outputs)
    }

    fn transfer(&mut self) -> StageResult<Vec<String>> {
        let st = Stage::Transfer;
        let fail = |e: anyhow::Error| StageFailure::new(st.name(), e);
        let tc = self.cfg.config.transfer.clone().expect("enabled");
        let target = LoadedConfig::load(&self.cfg.resolve(&tc.target)).map_err(|e| StageFailure::new(st.name(), e))?;
        let map_text = std::fs::read_to_string(self.cfg.resolve(&tc.entity_map))
            .map_err(|e| StageFailure::new(st.name(), format!("entity map: {e}")))?;
        let map = EntityMap::from_yaml_str(&map_text).map_err(|e| StageFailure::new(st.name(), e))?;

        let ga = self.graph(st)?;
        let (gb, _) = fetch_graph(&target.graph_source()).map_err(|e| StageFailure::new(st.name(), e))?;
        let file: SupernodeFile = self.read_json(st, SUPERNODES)?;
        let universe: BTreeSet<NodeId> = file.supernodes.iter().flat_map(|s| s.members.iter().cloned()).collect();
        let records_a = analysis::build_records(&self.raw_activations(st)?).map_err(fail)?;

        // Same probes with every entity swapped, ids preserved.
        let prompts: Vec<ProbePrompt> = self.read_json(st, PROMPTS)?;
        let mut probes_b = vec![seed_probe(&swap_entities(&ga.header().prompt_text(), &map))];
        probes_b.extend(prompts.iter().map(|p| ProbePrompt {
            id: p.id.clone(),
            text: swap_entities(&p.text, &map),
            concept: swap_entities(&p.concept, &map),
            tokens: Vec::new(),
        }));

        let matches = probegraph_core::transfer::match_features(&ga, &gb, Some(&universe))
            .map_err(|e| StageFailure::new(st.name(), e))?;
        let b_ids: Vec<NodeId> = matches.pairs.iter().map(|m| m.b.clone()).collect();
        let features_b = Self::feature_refs(st, &gb, &b_ids)?;
        let sub = self.dir.join("transfer");
        let raw_b = self.run_measure(st, &target, &features_b, &probes_b, &sub)?;
        let records_b = analysis::build_records(&raw_b).map_err(fail)?;

        let (matches, report) = analyze_transfer(&ga, &gb, &universe, &records_a, &records_b, &map)
            .map_err(|e| StageFailure::new(st.name(), e))?;

        let vocab_b = target.vocabulary().map_err(|e| StageFailure::new(st.name(), e))?;
        let thresholds_b = target.thresholds().map_err(|e| StageFailure::new(st.name(), e))?;
        let sigs_b = analysis::build_signatures(&gb, &records_b, &vocab_b, target.config.window).map_err(fail)?;
        let classified_b = analysis::classify_all(&sigs_b, gb.header().n_layers, &thresholds_b);
        let supernodes_b = analysis::supernodes(&classified_b, &records_b, &vocab_b);
        let heat = supernode_heatmap(&file.supernodes, &supernodes_b, &records_a, &records_b);
        let mut csv = Vec::new();
        heat.write_csv(&mut csv).map_err(|e| StageFailure::new(st.name(), e))?;

        let out = TransferFile {
            target_run_id: target.config.run_id.clone(),
            matches,
            report,
            target_supernodes: supernodes_b,
        };
        self.write(st, TRANSFER_REPORT, &json_bytes(&out))?;
        self.write(st, TRANSFER_HEATMAP, &csv)?;
        Ok(vec![TRANSFER_REPORT.into(), TRANSFER_HEATMAP.into()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downstream_closure() {
        assert_eq!(
            Stage::Select.downstream(),
            [Stage::Measure, Stage::Signatures, Stage::Classify, Stage::Subgraph, Stage::Evaluate, Stage::Transfer]
        );
        assert_eq!(Stage::Subgraph.downstream(), []);
        assert_eq!(Stage::Classify.downstream(), [Stage::Subgraph, Stage::Evaluate, Stage::Transfer]);
    }

    #[test]
    fn entity_swap_keeps_punctuation() {
        let map = EntityMap {
            swaps: [("Texas", "California"), ("Austin", "Sacramento")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        };
        assert_eq!(
            swap_entities("Texas: Is it true that the capital of Texas is Austin?", &map),
            "California: Is it true that the capital of California is Sacramento?"
        );
        assert_eq!(swap_entities("capital-of", &map), "capital-of");
    }

    #[test]
    fn names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_name(s.name()), Some(s));
        }
    }
}
