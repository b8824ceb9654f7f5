// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic synthetic circuits for the offline pipeline.
//!
//! Every circuit is a calibrated attribution graph plus recorded activations
//! (or a recorded grouping). `write_all` regenerates the bundled `fixtures/`
//! tree and checks it by running the real pipeline over it.

pub mod capitals;
pub mod design;
pub mod graphgen;
pub mod mj;
pub mod probes;
pub mod simple;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

use probegraph_acquisition::probes::ProbePrompt;
use probegraph_acquisition::service::{fixture_path, FixtureEntry, FixtureFile};
use probegraph_cli::config::LoadedConfig;
use probegraph_cli::pipeline::{self, EvaluationFile, Pipeline, SupernodeFile, TransferFile};
use probegraph_core::graph::{AttributionGraph, NodeId};
use probegraph_core::io::GroupingRow;
use probegraph_core::transfer::TransferClass;

use graphgen::{calibrate, GraphSpec, ScoreRow};

/// Per probe id, one value per token.
pub type Values = BTreeMap<String, Vec<f64>>;

pub struct Circuit {
    pub name: &'static str,
    pub spec: GraphSpec,
    pub probes: Vec<ProbePrompt>,
    pub fixtures: BTreeMap<NodeId, Values>,
}

/// Replacement and completeness targets: (graph R, subgraph R, graph C, subgraph C).
pub const TARGET_SCORES: [(&str, ScoreRow); 5] = [
    ("dallas", [0.72, 0.57, 0.90, 0.83]),
    ("oakland", [0.70, 0.57, 0.90, 0.83]),
    ("mj", [0.69, 0.49, 0.90, 0.81]),
    ("small", [0.73, 0.62, 0.91, 0.86]),
    ("muscle", [0.63, 0.45, 0.87, 0.79]),
];

pub const SEED: u64 = 20_251_016;
pub const MJ_ITERATIONS: usize = 40_000;

fn target_scores(name: &str) -> ScoreRow {
    TARGET_SCORES.iter().find(|(n, _)| *n == name).map(|(_, r)| *r).expect("known circuit")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_graph(dir: &Path, spec: &GraphSpec, name: &str) -> Result<AttributionGraph> {
    let (g, knobs, row) = calibrate(spec, target_scores(name)).with_context(|| format!("calibrating {name}"))?;
    eprintln!("{name}: {row:.4?} via {knobs:?}");
    write(&dir.join(pipeline::GRAPH), g.to_json_string())?;
    Ok(g)
}

fn write_fixtures(dir: &Path, c: &Circuit) -> Result<()> {
    let fx = dir.join("fixtures");
    if fx.exists() {
        std::fs::remove_dir_all(&fx)?;
    }
    for (id, values) in &c.fixtures {
        let mut file = FixtureFile::new();
        for p in &c.probes {
            let v = values.get(&p.id).with_context(|| format!("{id} has no values for {}", p.id))?;
            ensure!(v.len() == p.tokens.len(), "{id}/{}: {} values for {} tokens", p.id, v.len(), p.tokens.len());
            file.insert(
                p.id.clone(),
                FixtureEntry { text: p.text.clone(), tokens: p.tokens.clone(), values: v.clone() },
            );
        }
        write(&fixture_path(&fx, id), pipeline::json_bytes(&file))?;
    }
    Ok(())
}

/// Run every enabled stage into a scratch directory and return it.
pub fn run_pipeline(config: &Path) -> Result<tempfile::TempDir> {
    let cfg = LoadedConfig::load(config)?;
    let out = tempfile::tempdir()?;
    let mut p = Pipeline::open(cfg, out.path())?;
    p.run_all(false)?;
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Feature id to supernode name from a finished run.
fn grouping_of(run: &Path) -> Result<BTreeMap<NodeId, String>> {
    let file: SupernodeFile = read_json(&run.join(pipeline::SUPERNODES))?;
    Ok(file.supernodes.iter().flat_map(|s| s.members.iter().map(|m| (m.clone(), s.name.clone()))).collect())
}

fn check_groups(name: &str, got: &BTreeMap<NodeId, String>, want: &BTreeMap<NodeId, String>) -> Result<()> {
    let mut diffs = Vec::new();
    let ids: BTreeSet<&NodeId> = got.keys().chain(want.keys()).collect();
    for id in ids {
        if got.get(id) != want.get(id) {
            diffs.push(format!("{id}: got {:?}, want {:?}", got.get(id), want.get(id)));
        }
    }
    if !diffs.is_empty() {
        bail!("{name} grouping differs:\n  {}", diffs.join("\n  "));
    }
    Ok(())
}

fn grouping_csv(rows: &[GroupingRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn run_yaml(run_id: &str, transfer: bool) -> String {
    let mut s = format!("run_id: {run_id}\ngraph: graph.json\nmeasure:\n  transport: fixture\n  fixtures: fixtures\n");
    if transfer {
        s.push_str("transfer:\n  target: ../oakland/run.yaml\n  entity_map: entity_map.yaml\n");
    }
    s
}

fn emit_circuit(root: &Path, c: &Circuit, transfer: bool) -> Result<AttributionGraph> {
    let dir = root.join(c.name);
    let g = write_graph(&dir, &c.spec, c.name)?;
    write_fixtures(&dir, c)?;
    write(&dir.join("run.yaml"), run_yaml(c.name, transfer))?;
    Ok(g)
}

/// Copy the pipeline's grouping next to the graph and re-check the replay.
fn keep_grouping(root: &Path, name: &str, run: &Path) -> Result<()> {
    std::fs::copy(run.join(pipeline::GROUPING), root.join(name).join(pipeline::GROUPING))?;
    Ok(())
}

pub fn write_all(root: &Path) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let pair = capitals::build(SEED);

    emit_circuit(root, &pair.oakland, false)?;
    emit_circuit(root, &pair.dallas, true)?;
    let swaps: Vec<String> = capitals::SWAPS.iter().map(|(a, b)| format!("  {a}: {b}\n")).collect();
    write(&root.join("dallas/entity_map.yaml"), format!("swaps:\n{}", swaps.concat()))?;

    let oak = run_pipeline(&root.join("oakland/run.yaml"))?;
    check_groups("oakland", &grouping_of(oak.path())?, &pair.oakland_groups)?;
    keep_grouping(root, "oakland", oak.path())?;

    let dal = run_pipeline(&root.join("dallas/run.yaml"))?;
    check_groups("dallas", &grouping_of(dal.path())?, &pair.dallas_groups)?;
    keep_grouping(root, "dallas", dal.path())?;
    let t: TransferFile = read_json(&dal.path().join(pipeline::TRANSFER_REPORT))?;
    let r = &t.report;
    eprintln!(
        "transfer: {}/{} mean {:?}/{:?} sd {:?}/{:?} overlap {:?} peak {:?} entity {:?}",
        r.n_transferred,
        r.n_total,
        r.mean_layer_transferred,
        r.mean_layer_failed,
        r.sd_layer_transferred,
        r.sd_layer_failed,
        r.mean_overlap_transferred,
        r.peak_token_consistency_transferred,
        r.entity_appropriate_fraction,
    );
    let got: BTreeSet<NodeId> =
        r.pairs.iter().filter(|p| p.class == TransferClass::Transferred).map(|p| p.a.clone()).collect();
    ensure!(got == pair.transferred, "transferred set differs: {got:?}");

    let mj = mj::build(SEED, MJ_ITERATIONS);
    eprintln!("mj design scores: {:.4?}", mj.scores);
    emit_circuit(root, &mj.circuit, false)?;
    let run = run_pipeline(&root.join("mj/run.yaml"))?;
    check_groups("mj", &grouping_of(run.path())?, &mj.groups)?;
    keep_grouping(root, "mj", run.path())?;
    let ev: EvaluationFile = read_json(&run.path().join(pipeline::EVALUATION_JSON))?;
    for (method, e) in &ev.results {
        eprintln!("mj {method}: {:.4} {:.4}", e.peak_token_consistency, e.activation_pattern_similarity);
    }

    for rec in [simple::small(SEED ^ 7), simple::muscle(SEED ^ 11)] {
        write_recorded(root, &rec)?;
    }
    Ok(())
}

/// Graph plus recorded grouping, for circuits replayed without activations.
pub fn write_recorded(root: &Path, rec: &simple::Recorded) -> Result<()> {
    let dir = root.join(rec.name);
    write_graph(&dir, &rec.spec, rec.name)?;
    write(&dir.join(pipeline::GROUPING), grouping_csv(&rec.rows)?)
}
