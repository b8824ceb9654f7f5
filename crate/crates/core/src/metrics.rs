// SPDX-License-Identifier: MIT OR Apache-2.0

//! Replacement and Completeness scores for full graphs and pinned subgraphs.
//!
//! Influence is propagated backward from the target logit over normalized
//! incoming-edge fractions. Unpinned features are treated like error nodes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classifier::Supernode;
use crate::error::MetricsError;
use crate::graph::{normalize_incoming, AttributionGraph, InfluenceMatrix, NodeId, NodeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedSubgraph {
    pub pinned: BTreeSet<NodeId>,
    pub supernode_labels: BTreeMap<NodeId, String>,
}

impl PinnedSubgraph {
    /// Pin the given features plus every embedding and the target logit.
    pub fn new<'a>(
        graph: &AttributionGraph,
        features: impl IntoIterator<Item = &'a NodeId>,
    ) -> Result<Self, MetricsError> {
        let mut pinned: BTreeSet<NodeId> = graph.embeddings().map(|n| n.id.clone()).collect();
        pinned.insert(graph.logit().id.clone());
        for f in features {
            if graph.node(f).is_none() {
                return Err(MetricsError::UnknownPinned(f.to_string()));
            }
            pinned.insert(f.clone());
        }
        Ok(Self { pinned, supernode_labels: BTreeMap::new() })
    }

    pub fn from_supernodes(graph: &AttributionGraph, supernodes: &[Supernode]) -> Result<Self, MetricsError> {
        let mut sub = Self::new(graph, supernodes.iter().flat_map(|s| s.members.iter()))?;
        for s in supernodes {
            for m in &s.members {
                sub.supernode_labels.insert(m.clone(), s.name.clone());
            }
        }
        Ok(sub)
    }

    /// Every feature pinned: the full-graph scoring setting.
    pub fn all_features(graph: &AttributionGraph) -> Self {
        let ids: Vec<NodeId> = graph.features().map(|f| f.id.clone()).collect();
        Self::new(graph, ids.iter()).expect("graph ids are valid")
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.pinned.contains(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletenessWeighting {
    #[default]
    Influence,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphScores {
    pub replacement: f64,
    pub completeness: f64,
}

/// Children lists derived from the normalized parent rows.
fn children(m: &InfluenceMatrix) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); m.len()];
    for v in 0..m.len() {
        for &(p, frac) in m.row(v) {
            out[p].push((v, frac));
        }
    }
    out
}

fn propagate(graph: &AttributionGraph, m: &InfluenceMatrix, pass: impl Fn(usize) -> bool) -> Vec<f64> {
    let kids = children(m);
    let mut infl = vec![0.0; graph.nodes().len()];
    infl[graph.logit_index()] = 1.0;
    for &u in graph.topological_order().iter().rev() {
        if u == graph.logit_index() {
            continue;
        }
        infl[u] = kids[u].iter().filter(|(v, _)| pass(*v)).map(|(v, f)| f * infl[*v]).sum();
    }
    infl
}

/// Total path influence of every node on the target logit, indexed like
/// `graph.nodes()`.
pub fn influence_to_logit(graph: &AttributionGraph, m: &InfluenceMatrix) -> Vec<f64> {
    propagate(graph, m, |_| true)
}

pub fn influence_by_id(graph: &AttributionGraph) -> BTreeMap<NodeId, f64> {
    let m = normalize_incoming(graph);
    let infl = influence_to_logit(graph, &m);
    graph.nodes().iter().zip(infl).map(|(n, i)| (n.id.clone(), i)).collect()
}

fn pinned_mask(graph: &AttributionGraph, pinned: &PinnedSubgraph) -> Result<Vec<bool>, MetricsError> {
    if let Some(id) = pinned.pinned.iter().find(|id| graph.node(id).is_none()) {
        return Err(MetricsError::UnknownPinned(id.to_string()));
    }
    Ok(graph
        .nodes()
        .iter()
        .map(|n| match n.kind {
            NodeKind::Logit => true,
            NodeKind::Embedding => true,
            _ => pinned.contains(&n.id),
        })
        .collect())
}

/// Share of source-to-logit influence carried by paths whose intermediate
/// nodes are all pinned features.
pub fn replacement_score(graph: &AttributionGraph, pinned: &PinnedSubgraph) -> Result<f64, MetricsError> {
    let m = normalize_incoming(graph);
    replacement_with(graph, &m, &pinned_mask(graph, pinned)?, &influence_to_logit(graph, &m))
}

fn replacement_with(
    graph: &AttributionGraph,
    m: &InfluenceMatrix,
    mask: &[bool],
    infl: &[f64],
) -> Result<f64, MetricsError> {
    let nodes = graph.nodes();
    let through =
        propagate(graph, m, |v| nodes[v].kind == NodeKind::Logit || (nodes[v].kind == NodeKind::Feature && mask[v]));
    let total: f64 =
        (0..nodes.len()).filter(|&v| v != graph.logit_index() && m.row(v).is_empty()).map(|v| infl[v]).sum();
    let kept: f64 = (0..nodes.len()).filter(|&v| nodes[v].kind == NodeKind::Embedding).map(|v| through[v]).sum();
    if total <= 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok((kept / total).clamp(0.0, 1.0))
}

/// Weighted mean over pinned nodes of the incoming fraction that comes from
/// pinned features or embeddings. Source nodes count as fully explained.
pub fn completeness_score(
    graph: &AttributionGraph,
    pinned: &PinnedSubgraph,
    weighting: CompletenessWeighting,
) -> Result<f64, MetricsError> {
    let m = normalize_incoming(graph);
    completeness_with(graph, &m, &pinned_mask(graph, pinned)?, &influence_to_logit(graph, &m), weighting)
}

fn completeness_with(
    graph: &AttributionGraph,
    m: &InfluenceMatrix,
    mask: &[bool],
    infl: &[f64],
    weighting: CompletenessWeighting,
) -> Result<f64, MetricsError> {
    let nodes = graph.nodes();
    let mut num = 0.0;
    let mut den = 0.0;
    for v in (0..nodes.len()).filter(|&v| mask[v]) {
        let explained = if m.row(v).is_empty() {
            1.0
        } else {
            m.row(v)
                .iter()
                .filter(|(p, _)| mask[*p] && matches!(nodes[*p].kind, NodeKind::Feature | NodeKind::Embedding))
                .map(|(_, f)| f)
                .sum()
        };
        let w = match weighting {
            CompletenessWeighting::Influence => infl[v],
            CompletenessWeighting::Uniform => 1.0,
        };
        num += w * explained;
        den += w;
    }
    if den <= 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

pub fn score_graph(
    graph: &AttributionGraph,
    pinned: &PinnedSubgraph,
    weighting: CompletenessWeighting,
) -> Result<GraphScores, MetricsError> {
    let m = normalize_incoming(graph);
    let mask = pinned_mask(graph, pinned)?;
    let infl = influence_to_logit(graph, &m);
    Ok(GraphScores {
        replacement: replacement_with(graph, &m, &mask, &infl)?,
        completeness: completeness_with(graph, &m, &mask, &infl, weighting)?,
    })
}

/// Subgraph export shaped like a Neuronpedia subgraph upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphExport {
    pub model: String,
    pub prompt: String,
    pub target_logit: String,
    #[serde(rename = "pinnedIds")]
    pub pinned_ids: Vec<NodeId>,
    /// `[name, member, member, ...]` per supernode.
    pub supernodes: Vec<Vec<String>>,
    pub supernode_labels: BTreeMap<NodeId, String>,
    pub graph_scores: GraphScores,
    pub subgraph_scores: GraphScores,
}

impl SubgraphExport {
    pub fn new(
        graph: &AttributionGraph,
        pinned: &PinnedSubgraph,
        supernodes: &[Supernode],
        graph_scores: GraphScores,
        subgraph_scores: GraphScores,
    ) -> Self {
        let h = graph.header();
        Self {
            model: h.model.clone(),
            prompt: h.prompt_text(),
            target_logit: h.target_logit.clone(),
            pinned_ids: pinned.pinned.iter().cloned().collect(),
            supernodes: supernodes
                .iter()
                .map(|s| std::iter::once(s.name.clone()).chain(s.members.iter().map(|m| m.to_string())).collect())
                .collect(),
            supernode_labels: pinned.supernode_labels.clone(),
            graph_scores,
            subgraph_scores,
        }
    }
}
