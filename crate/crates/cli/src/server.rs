// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local JSON facade over one run directory.
//!
//! Reads run concurrently; mutations take the write lock, so they are
//! serialized per run. A mutation recomputes its own stage and leaves
//! downstream stages stale until `POST /run`. Reading a stale stage is a 409.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use probegraph_acquisition::concepts::Concept;
use probegraph_core::classifier::{Category, NameProvenance, Supernode};
use probegraph_core::graph::{parse_graph, GraphFormat, NodeId};
use probegraph_core::selection::select_nodes_by_cumulative_influence;

use crate::config::LoadedConfig;
use crate::error::{ServeError, StageFailure};
use crate::pipeline::{
    json_bytes, GroupingSource, Pipeline, Stage, StageStatus, SupernodeFile, CONCEPTS, GRAPH, PROMPTS, SELECTED,
    SIGNATURES, SUBGRAPH, SUPERNODES, TRANSFER_REPORT,
};

pub type Shared = Arc<RwLock<Pipeline>>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl ToString) -> Self {
        Self { status, body: json!({ "error": msg.to_string() }) }
    }

    fn stale(stage: Stage, status: &StageStatus) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            body: json!({ "error": format!("{stage} is not fresh"), "stage": stage.name(), "status": status }),
        }
    }
}

impl From<StageFailure> for ApiError {
    fn from(f: StageFailure) -> Self {
        let status = if f.precondition { StatusCode::CONFLICT } else { StatusCode::UNPROCESSABLE_ENTITY };
        Self { status, body: json!({ "error": f.to_string(), "stage": f.stage, "cause": f.cause }) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(state: &Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Pipeline) -> ApiResult<T> + Send + 'static,
{
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || {
        let mut p = state.write().map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "state poisoned"))?;
        f(&mut p)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
}

fn read_fresh(p: &Pipeline, stage: Stage, artifact: &str) -> ApiResult<Value> {
    let status = p.status(stage);
    if status != StageStatus::Fresh {
        return Err(ApiError::stale(stage, &status));
    }
    let bytes = std::fs::read(p.path(artifact)).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
}

fn get_json(state: &Shared, stage: Stage, artifact: &'static str) -> ApiResult<Json<Value>> {
    let p = state.read().map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "state poisoned"))?;
    read_fresh(&p, stage, artifact).map(Json)
}

/// Stages left stale by a mutation.
fn dirty(p: &Pipeline, stage: Stage) -> Vec<&'static str> {
    stage
        .downstream()
        .into_iter()
        .filter(|s| p.enabled(*s) && p.status(*s) != StageStatus::Fresh)
        .map(Stage::name)
        .collect()
}

async fn index() -> impl IntoResponse {
    "probegraph facade: GET /graph /influence-curve /concepts /signatures /supernodes /scores /transfer \
     /export/subgraph /status; PUT /threshold /concepts /supernodes; POST /probes /run\n"
}

async fn status(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    let p = s.read().map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "state poisoned"))?;
    Ok(Json(json!({ "run_id": p.cfg.config.run_id, "tau": p.cfg.config.tau, "stages": p.statuses() })))
}

async fn graph(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    get_json(&s, Stage::GraphFetch, GRAPH)
}

async fn influence_curve(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    let p = s.read().map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "state poisoned"))?;
    let selected = read_fresh(&p, Stage::Select, SELECTED)?;
    let bytes = std::fs::read(p.path(GRAPH)).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    let g = parse_graph(&bytes, GraphFormat::Json).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    let sel = select_nodes_by_cumulative_influence(&g, p.cfg.config.tau)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    Ok(Json(json!({
        "tau": p.cfg.config.tau,
        "n_selected": selected["n_selected"],
        "cumulative_fraction": selected["cumulative_fraction"],
        "points": sel.cumulative_curve,
    })))
}

#[derive(Deserialize)]
struct ThresholdBody {
    tau: f64,
}

async fn put_threshold(State(s): State<Shared>, Json(body): Json<ThresholdBody>) -> ApiResult<Json<Value>> {
    if !(0.0..=1.0).contains(&body.tau) || !body.tau.is_finite() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("tau {} outside [0, 1]", body.tau)));
    }
    blocking(&s, move |p| {
        let mut config = p.cfg.config.clone();
        config.tau = body.tau;
        let cfg = LoadedConfig::from_config(config, p.cfg.base_dir.clone())
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?;
        p.set_config(cfg).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        p.run(Stage::Select)?;
        let sel = read_fresh(p, Stage::Select, SELECTED)?;
        Ok(Json(json!({
            "tau": body.tau,
            "n_selected": sel["n_selected"],
            "cumulative_fraction": sel["cumulative_fraction"],
            "dirty": dirty(p, Stage::Select),
        })))
    })
    .await
}

async fn get_concepts(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    get_json(&s, Stage::Concepts, CONCEPTS)
}

async fn put_concepts(State(s): State<Shared>, Json(concepts): Json<Vec<Concept>>) -> ApiResult<Json<Value>> {
    let mut seen = BTreeSet::new();
    for c in &concepts {
        let label = c.label.trim();
        if label.is_empty() || !seen.insert(label.to_lowercase()) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("blank or duplicate concept {:?}", c.label),
            ));
        }
    }
    if !concepts.iter().any(|c| c.accepted) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty accepted set"));
    }
    blocking(&s, move |p| {
        let concepts: Vec<Concept> =
            concepts.into_iter().map(|c| Concept { label: c.label.trim().to_owned(), ..c }).collect();
        p.replace_outputs(Stage::Concepts, &[(CONCEPTS, json_bytes(&concepts))])?;
        Ok(Json(json!({ "concepts": concepts, "dirty": dirty(p, Stage::Concepts) })))
    })
    .await
}

async fn post_probes(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    blocking(&s, |p| {
        p.run(Stage::Probes)?;
        let probes = read_fresh(p, Stage::Probes, PROMPTS)?;
        Ok(Json(json!({ "probes": probes, "dirty": dirty(p, Stage::Probes) })))
    })
    .await
}

async fn signatures(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    get_json(&s, Stage::Signatures, SIGNATURES)
}

async fn get_supernodes(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    get_json(&s, Stage::Classify, SUPERNODES)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManualGroup {
    pub name: String,
    /// Category label; defaults to the classifier's category of the first member.
    #[serde(default)]
    pub category: Option<String>,
    pub members: Vec<NodeId>,
}

/// Validate a manual regrouping against the classified features.
pub fn apply_manual_groups(file: &SupernodeFile, groups: &[ManualGroup]) -> Result<SupernodeFile, String> {
    let known: BTreeMap<&NodeId, Category> = file.classifications.iter().map(|c| (&c.feature, c.category)).collect();
    let mut owner: BTreeMap<&NodeId, &str> = BTreeMap::new();
    let mut names = BTreeSet::new();
    let mut supernodes = Vec::new();
    for g in groups {
        let name = g.name.trim();
        if name.is_empty() || !names.insert(name.to_owned()) {
            return Err(format!("blank or duplicate supernode name {:?}", g.name));
        }
        if g.members.is_empty() {
            return Err(format!("supernode {name:?} has no members"));
        }
        for m in &g.members {
            if !known.contains_key(m) {
                return Err(format!("{m} is not a classified feature"));
            }
            if let Some(prev) = owner.insert(m, name) {
                return Err(format!("{m} is in both {prev:?} and {name:?}"));
            }
        }
        let category = match &g.category {
            Some(label) => label.parse::<Category>().map_err(|e| e.to_string())?,
            None => known[&g.members[0]],
        };
        let mut members = g.members.clone();
        members.sort();
        supernodes.push(Supernode {
            name: name.to_owned(),
            category,
            members,
            name_provenance: NameProvenance::Manual,
        });
    }
    let cat_of: BTreeMap<NodeId, Category> =
        supernodes.iter().flat_map(|s| s.members.iter().map(move |m| (m.clone(), s.category))).collect();
    let classifications = file
        .classifications
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.category = cat_of.get(&c.feature).copied().unwrap_or(Category::Ungrouped);
            c.trace.chosen = c.category;
            c
        })
        .collect();
    Ok(SupernodeFile { source: GroupingSource::HumanOverride, supernodes, classifications })
}

async fn put_supernodes(State(s): State<Shared>, Json(groups): Json<Vec<ManualGroup>>) -> ApiResult<Json<Value>> {
    blocking(&s, move |p| {
        let current = read_fresh(p, Stage::Classify, SUPERNODES)?;
        let file: SupernodeFile =
            serde_json::from_value(current).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        let edited =
            apply_manual_groups(&file, &groups).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?;
        let files = Pipeline::grouping_files(edited.source, edited.supernodes, edited.classifications)?;
        p.replace_outputs(Stage::Classify, &files)?;
        let out = read_fresh(p, Stage::Classify, SUPERNODES)?;
        Ok(Json(json!({ "supernodes": out["supernodes"], "dirty": dirty(p, Stage::Classify) })))
    })
    .await
}

async fn scores(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    let v = get_json(&s, Stage::Subgraph, SUBGRAPH)?.0;
    Ok(Json(json!({ "graph": v["graph_scores"], "subgraph": v["subgraph_scores"] })))
}

async fn transfer(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    get_json(&s, Stage::Transfer, TRANSFER_REPORT)
}

async fn export_subgraph(State(s): State<Shared>) -> ApiResult<impl IntoResponse> {
    let v = get_json(&s, Stage::Subgraph, SUBGRAPH)?;
    Ok(([(header::CONTENT_DISPOSITION, "attachment; filename=\"subgraph.json\"")], v))
}

#[derive(Deserialize, Default)]
struct RunBody {
    #[serde(default)]
    stages: Option<Vec<String>>,
    #[serde(default)]
    force: bool,
}

async fn post_run(State(s): State<Shared>, body: Option<Json<RunBody>>) -> ApiResult<Json<Value>> {
    let body = body.map(|b| b.0).unwrap_or_default();
    blocking(&s, move |p| {
        let ran = match body.stages {
            None => p.run_all(body.force)?,
            Some(names) => {
                let mut stages = names
                    .iter()
                    .map(|n| {
                        Stage::from_name(n).ok_or_else(|| {
                            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown stage {n}"))
                        })
                    })
                    .collect::<ApiResult<Vec<_>>>()?;
                stages.sort();
                for st in &stages {
                    p.run(*st)?;
                }
                stages
            }
        };
        let ran: Vec<&str> = ran.into_iter().map(Stage::name).collect();
        Ok(Json(json!({ "ran": ran, "stages": p.statuses() })))
    })
    .await
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/status", get(status))
        .route("/graph", get(graph))
        .route("/influence-curve", get(influence_curve))
        .route("/threshold", put(put_threshold))
        .route("/concepts", get(get_concepts).put(put_concepts))
        .route("/probes", post(post_probes))
        .route("/signatures", get(signatures))
        .route("/supernodes", get(get_supernodes).put(put_supernodes))
        .route("/scores", get(scores))
        .route("/transfer", get(transfer))
        .route("/export/subgraph", get(export_subgraph))
        .route("/run", post(post_run))
        .with_state(state)
}

pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::PortInUse(addr.to_string())
        } else {
            ServeError::Io(e)
        }
    })
}

pub async fn serve(pipeline: Pipeline, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(Arc::new(RwLock::new(pipeline)))).await?;
    Ok(())
}
