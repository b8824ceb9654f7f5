// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-memory analysis steps shared by the pipeline stages.

use std::collections::{BTreeMap, BTreeSet};

use probegraph_acquisition::probes::SEED_PROBE_ID;
use probegraph_core::baselines::{cluster_cosine, cluster_layer_adjacency, BaselineConfig, BaselineMethod, Clustering};
use probegraph_core::classifier::{build_supernodes, classify_feature, Classification, ClassifierConfig, Supernode};
use probegraph_core::coherence::{evaluate_grouping, groups_from_supernodes, FeatureProfile, GroupingEvaluation};
use probegraph_core::graph::{AttributionGraph, NodeId};
use probegraph_core::io::RawActivation;
use probegraph_core::lexicon::FunctionalVocabulary;
use probegraph_core::signatures::{
    aggregate_signature, compute_record, observe, ActivationRecord, BaselineStats, Signature,
};

use crate::config::EvaluateConfig;

pub const CONCEPT_ALIGNED: &str = "concept_aligned";

pub type Records = BTreeMap<NodeId, Vec<ActivationRecord>>;

/// Per-probe records for every feature, seed excluded. The seed prompt's
/// activations are the cosine reference; the robust-z baseline pools every
/// activation of the feature, seed included.
pub fn build_records(raw: &[RawActivation]) -> anyhow::Result<Records> {
    let mut by_feature: BTreeMap<&NodeId, Vec<&RawActivation>> = BTreeMap::new();
    for r in raw {
        by_feature.entry(&r.feature).or_default().push(r);
    }
    let mut out = Records::new();
    for (id, rows) in by_feature {
        let seed = rows
            .iter()
            .find(|r| r.probe_id == SEED_PROBE_ID)
            .ok_or_else(|| anyhow::anyhow!("no seed activations for {id}"))?;
        let pooled: Vec<f64> = rows.iter().flat_map(|r| r.values.iter().copied()).collect();
        let baseline = BaselineStats::from_values(&pooled);
        let mut recs = Vec::new();
        for r in rows.iter().filter(|r| r.probe_id != SEED_PROBE_ID) {
            recs.push(compute_record(id.clone(), &r.probe_id, &r.values, &r.tokens, &seed.values, baseline)?);
        }
        recs.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
        out.insert(id.clone(), recs);
    }
    Ok(out)
}

/// Seed-prompt activation vectors, the input of the cosine baseline.
pub fn seed_vectors(raw: &[RawActivation]) -> BTreeMap<NodeId, Vec<f64>> {
    raw.iter().filter(|r| r.probe_id == SEED_PROBE_ID).map(|r| (r.feature.clone(), r.values.clone())).collect()
}

pub fn build_signatures(
    graph: &AttributionGraph,
    records: &Records,
    vocab: &FunctionalVocabulary,
    window: usize,
) -> anyhow::Result<Vec<Signature>> {
    let mut out = Vec::with_capacity(records.len());
    for (id, recs) in records {
        if recs.is_empty() {
            anyhow::bail!("no probe activations for {id}");
        }
        let layer = graph
            .node(id)
            .and_then(|n| n.layer)
            .ok_or_else(|| anyhow::anyhow!("{id} is not a feature of the graph"))?;
        let peaks = recs.iter().map(|r| observe(r, vocab, window).map(|(p, _)| p)).collect::<Result<Vec<_>, _>>()?;
        out.push(aggregate_signature(layer, recs, &peaks)?);
    }
    Ok(out)
}

pub fn classify_all(
    signatures: &[Signature],
    n_layers: u32,
    cfg: &ClassifierConfig,
) -> Vec<(Signature, Classification)> {
    signatures
        .iter()
        .map(|s| {
            let c = classify_feature(s, n_layers, cfg);
            tracing::debug!(feature = %c.feature, category = %c.category, reason = %c.trace.reason, "classified");
            (s.clone(), c)
        })
        .collect()
}

pub fn supernodes(
    classified: &[(Signature, Classification)],
    records: &Records,
    vocab: &FunctionalVocabulary,
) -> Vec<Supernode> {
    build_supernodes(classified, records, vocab)
}

pub fn profiles(
    graph: &AttributionGraph,
    signatures: &[Signature],
    records: &Records,
) -> BTreeMap<NodeId, FeatureProfile> {
    signatures
        .iter()
        .map(|s| {
            let influence = graph.node(&s.feature).and_then(|n| n.influence).unwrap_or(0.0);
            let p = FeatureProfile {
                id: s.feature.clone(),
                layer: s.layer,
                influence,
                signature: s.clone(),
                records: records.get(&s.feature).cloned().unwrap_or_default(),
            };
            (s.feature.clone(), p)
        })
        .collect()
}

pub struct EvaluationRun {
    /// `(method, evaluation)` in report order.
    pub results: Vec<(String, GroupingEvaluation)>,
    pub baselines: Vec<(BaselineMethod, Clustering)>,
    pub groupings: Vec<(String, Vec<Vec<NodeId>>)>,
}

/// Score the concept-aligned grouping, geometric baselines over the same
/// features, and any recorded groupings.
pub fn evaluate(
    concept: &[Supernode],
    profiles: &BTreeMap<NodeId, FeatureProfile>,
    seeds: &BTreeMap<NodeId, Vec<f64>>,
    recorded: Vec<(String, Vec<Vec<NodeId>>)>,
    cfg: &EvaluateConfig,
) -> anyhow::Result<EvaluationRun> {
    let concept_groups = groups_from_supernodes(concept);
    let universe: BTreeSet<NodeId> = concept_groups.iter().flatten().cloned().collect();
    let mut groupings = vec![(CONCEPT_ALIGNED.to_owned(), concept_groups.clone())];
    let mut baselines = Vec::new();
    if cfg.baselines && universe.len() >= 2 {
        for method in [BaselineMethod::CosineAgglomerative, BaselineMethod::LayerAdjacencyWard] {
            let mut bc = BaselineConfig::new(method, Some(concept_groups.len()));
            if let Some(k) = cfg.n_clusters {
                bc.n_clusters = k;
            }
            bc.n_clusters = bc.n_clusters.min(universe.len());
            let clustering = match method {
                BaselineMethod::CosineAgglomerative => {
                    let items = universe
                        .iter()
                        .map(|id| {
                            seeds
                                .get(id)
                                .map(|v| (id.clone(), v.clone()))
                                .ok_or_else(|| anyhow::anyhow!("no seed activations for {id}"))
                        })
                        .collect::<anyhow::Result<Vec<_>>>()?;
                    cluster_cosine(&items, bc.n_clusters, bc.linkage)?
                }
                BaselineMethod::LayerAdjacencyWard => {
                    let items: Vec<(NodeId, u32, f64)> = universe
                        .iter()
                        .map(|id| {
                            let p = &profiles[id];
                            (id.clone(), p.layer, p.influence)
                        })
                        .collect();
                    cluster_layer_adjacency(&items, bc.n_clusters, bc.linkage)?
                }
            };
            groupings.push((method.tag().to_owned(), clustering.groups.clone()));
            baselines.push((method, clustering));
        }
    }
    groupings.extend(recorded);
    let results = groupings
        .iter()
        .map(|(m, g)| Ok((m.clone(), evaluate_grouping(g, profiles, cfg.sparsity_mode)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(EvaluationRun { results, baselines, groupings })
}
