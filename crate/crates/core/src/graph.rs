// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution graph model, ingestion and incoming-influence normalization.
//!
//! The on-disk format is a strict subset of the Neuronpedia graph export:
//!
//! ```text
//! {
//!   "metadata": { "model", "n_layers", "prompt_tokens": [..], "target_logit" },
//!   "nodes":    [ { "id", "kind", "layer"?, "feature_index"?, "ctx_position"?,
//!                   "influence"?, "label"? } ],
//!   "edges":    [ { "src", "dst", "weight" } ]
//! }
//! ```
//!
//! `kind` is one of `embedding`, `feature`, `error`, `logit`. Fields outside
//! this schema are kept as opaque metadata so a load/save cycle is lossless.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::GraphError;

/// Identifier of a node, unique within one graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(raw: impl Into<String>) -> Self {
        Self(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Embedding,
    Feature,
    Error,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub model: String,
    pub n_layers: u32,
    pub prompt_tokens: Vec<String>,
    pub target_logit: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl GraphHeader {
    /// Seed prompt text reconstructed from its tokens.
    pub fn prompt_text(&self) -> String {
        let mut text = String::new();
        for tok in &self.prompt_tokens {
            text.push_str(&tok.replace('\u{2581}', " "));
        }
        text.trim().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctx_position: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Node {
    /// Influence as used for selection; absent values count as zero.
    pub fn influence_or_zero(&self) -> f64 {
        self.influence.unwrap_or(0.0)
    }

    /// Typed view of a feature node. `None` for other kinds.
    pub fn as_feature(&self) -> Option<FeatureNode<'_>> {
        match (self.kind, self.layer, self.feature_index, self.ctx_position) {
            (NodeKind::Feature, Some(layer), Some(feature_index), Some(ctx_position)) => Some(FeatureNode {
                id: &self.id,
                layer,
                feature_index,
                ctx_position,
                influence: self.influence_or_zero(),
                autointerp_label: self.label.as_deref(),
            }),
            _ => None,
        }
    }
}

/// Borrowed view of a validated feature node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureNode<'a> {
    pub id: &'a NodeId,
    pub layer: u32,
    pub feature_index: u64,
    pub ctx_position: u32,
    pub influence: f64,
    pub autointerp_label: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub weight: f64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    metadata: GraphHeader,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

/// A validated attribution DAG. Immutable after construction.
#[derive(Debug, Clone)]
pub struct AttributionGraph {
    header: GraphHeader,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    extra: BTreeMap<String, Value>,
    index: HashMap<NodeId, usize>,
    /// Edge indices entering each node.
    incoming: Vec<Vec<usize>>,
    /// Edge indices leaving each node.
    outgoing: Vec<Vec<usize>>,
    topo: Vec<usize>,
    logit: usize,
}

impl PartialEq for AttributionGraph {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header
            && self.nodes == other.nodes
            && self.edges == other.edges
            && self.extra == other.extra
    }
}

/// Parse and validate a graph from raw bytes.
pub fn parse_graph(bytes: &[u8], format: GraphFormat) -> Result<AttributionGraph, GraphError> {
    match format {
        GraphFormat::Json => {
            let text =
                std::str::from_utf8(bytes).map_err(|e| GraphError::Schema(format!("input is not UTF-8: {e}")))?;
            let file: GraphFile = serde_json::from_str(text).map_err(|e| GraphError::Schema(e.to_string()))?;
            AttributionGraph::build(file.metadata, file.nodes, file.edges, file.extra)
        }
    }
}

impl AttributionGraph {
    pub fn new(header: GraphHeader, nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        Self::build(header, nodes, edges, BTreeMap::new())
    }

    fn build(
        header: GraphHeader,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        extra: BTreeMap<String, Value>,
    ) -> Result<Self, GraphError> {
        if header.prompt_tokens.is_empty() {
            return Err(GraphError::Schema("metadata.prompt_tokens is empty".into()));
        }
        let prompt_len = header.prompt_tokens.len() as u32;

        let mut index = HashMap::with_capacity(nodes.len());
        let mut n_embeddings = 0usize;
        let mut logits = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.id.as_str().is_empty() {
                return Err(GraphError::Schema(format!("node at position {i} has an empty id")));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(GraphError::Schema(format!("duplicate node id `{}`", node.id)));
            }
            match node.kind {
                NodeKind::Embedding => n_embeddings += 1,
                NodeKind::Logit => logits.push(i),
                NodeKind::Feature => {
                    let missing =
                        |field: &str| GraphError::Schema(format!("feature `{}` is missing `{field}`", node.id));
                    let layer = node.layer.ok_or_else(|| missing("layer"))?;
                    node.feature_index.ok_or_else(|| missing("feature_index"))?;
                    node.ctx_position.ok_or_else(|| missing("ctx_position"))?;
                    if layer >= header.n_layers {
                        return Err(GraphError::Schema(format!(
                            "feature `{}` has layer {layer} >= n_layers {}",
                            node.id, header.n_layers
                        )));
                    }
                    if let Some(inf) = node.influence {
                        if !inf.is_finite() || inf < 0.0 {
                            return Err(GraphError::Schema(format!(
                                "feature `{}` has invalid influence {inf}",
                                node.id
                            )));
                        }
                    }
                }
                NodeKind::Error => {}
            }
            if let Some(pos) = node.ctx_position {
                if pos >= prompt_len {
                    return Err(GraphError::Schema(format!(
                        "node `{}` has ctx_position {pos} >= prompt length {prompt_len}",
                        node.id
                    )));
                }
            }
        }
        if n_embeddings == 0 {
            return Err(GraphError::Schema("graph has no embedding node".into()));
        }
        let logit = match logits.as_slice() {
            [one] => *one,
            [] => return Err(GraphError::Schema("graph has no logit node".into())),
            _ => {
                return Err(GraphError::Schema(format!(
                    "graph has {} logit nodes, expected exactly one target",
                    logits.len()
                )))
            }
        };

        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (e, edge) in edges.iter().enumerate() {
            let src = *index.get(&edge.src).ok_or_else(|| GraphError::DanglingEdge(edge.src.to_string()))?;
            let dst = *index.get(&edge.dst).ok_or_else(|| GraphError::DanglingEdge(edge.dst.to_string()))?;
            if src == dst {
                return Err(GraphError::Schema(format!("self-loop on `{}`", edge.src)));
            }
            if !edge.weight.is_finite() {
                return Err(GraphError::Schema(format!("edge `{}` -> `{}` has non-finite weight", edge.src, edge.dst)));
            }
            outgoing[src].push(e);
            incoming[dst].push(e);
        }

        let topo = topological_order(&nodes, &edges, &index, &incoming, &outgoing)?;

        Ok(Self { header, nodes, edges, extra, index, incoming, outgoing, topo, logit })
    }

    pub fn header(&self) -> &GraphHeader {
        &self.header
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn logit_index(&self) -> usize {
        self.logit
    }

    pub fn logit(&self) -> &Node {
        &self.nodes[self.logit]
    }

    /// Node indices in topological order (sources first).
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn incoming_edges(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.incoming[node].iter().map(move |&e| &self.edges[e])
    }

    pub fn outgoing_edges(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.outgoing[node].iter().map(move |&e| &self.edges[e])
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.incoming[node].len()
    }

    pub fn features(&self) -> impl Iterator<Item = FeatureNode<'_>> {
        self.nodes.iter().filter_map(Node::as_feature)
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Embedding)
    }

    /// Serialize back to the documented JSON schema.
    pub fn to_json_string(&self) -> String {
        let file = GraphFile {
            metadata: self.header.clone(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            extra: self.extra.clone(),
        };
        serde_json::to_string_pretty(&file).expect("graph serialization is infallible")
    }
}

fn topological_order(
    nodes: &[Node],
    edges: &[Edge],
    index: &HashMap<NodeId, usize>,
    incoming: &[Vec<usize>],
    outgoing: &[Vec<usize>],
) -> Result<Vec<usize>, GraphError> {
    let mut indegree: Vec<usize> = incoming.iter().map(Vec::len).collect();
    let mut queue: VecDeque<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &e in &outgoing[v] {
            let w = index[&edges[e].dst];
            indegree[w] -= 1;
            if indegree[w] == 0 {
                queue.push_back(w);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|&i| indegree[i] > 0).expect("some node keeps a positive in-degree");
        return Err(GraphError::Cycle(nodes[stuck].id.to_string()));
    }
    Ok(order)
}

/// Per-node distribution over parents, from absolute incoming edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    /// `rows[v]` lists `(parent index, fraction)`; empty for sources.
    rows: Vec<Vec<(usize, f64)>>,
    /// `signed[v]` keeps the original signed weights in the same order.
    signed: Vec<Vec<f64>>,
    warnings: Vec<String>,
}

impl InfluenceMatrix {
    pub fn row(&self, node: usize) -> &[(usize, f64)] {
        &self.rows[node]
    }

    pub fn signed_row(&self, node: usize) -> &[f64] {
        &self.signed[node]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Nodes with parents whose absolute weights all vanish.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Scale each node's incoming |weight| values to sum to one.
pub fn normalize_incoming(graph: &AttributionGraph) -> InfluenceMatrix {
    let n = graph.nodes.len();
    let mut rows = Vec::with_capacity(n);
    let mut signed = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    for v in 0..n {
        let parents: Vec<(usize, f64)> =
            graph.incoming[v].iter().map(|&e| (graph.index[&graph.edges[e].src], graph.edges[e].weight)).collect();
        let total: f64 = parents.iter().map(|(_, w)| w.abs()).sum();
        signed.push(parents.iter().map(|&(_, w)| w).collect());
        if parents.is_empty() {
            rows.push(Vec::new());
        } else if total == 0.0 {
            warnings.push(format!("node `{}` has {} incoming edges of zero weight", graph.nodes[v].id, parents.len()));
            rows.push(Vec::new());
        } else {
            rows.push(parents.into_iter().map(|(p, w)| (p, w.abs() / total)).collect());
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    InfluenceMatrix { rows, signed, warnings }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn header(n_layers: u32, tokens: &[&str]) -> GraphHeader {
        GraphHeader {
            model: "test-model".into(),
            n_layers,
            prompt_tokens: tokens.iter().map(|s| s.to_string()).collect(),
            target_logit: " Austin".into(),
            extra: BTreeMap::new(),
        }
    }

    pub(crate) fn node(id: &str, kind: NodeKind) -> Node {
        Node {
            id: id.into(),
            kind,
            layer: None,
            feature_index: None,
            ctx_position: None,
            influence: None,
            label: None,
            extra: BTreeMap::new(),
        }
    }

    pub(crate) fn feature(id: &str, layer: u32, index: u64, pos: u32, influence: f64) -> Node {
        Node {
            layer: Some(layer),
            feature_index: Some(index),
            ctx_position: Some(pos),
            influence: Some(influence),
            ..node(id, NodeKind::Feature)
        }
    }

    pub(crate) fn edge(src: &str, dst: &str, weight: f64) -> Edge {
        Edge { src: src.into(), dst: dst.into(), weight, extra: BTreeMap::new() }
    }

    const MINIMAL: &str = r#"{
      "metadata": {"model": "m", "n_layers": 4, "prompt_tokens": ["a", " b"], "target_logit": " c"},
      "nodes": [
        {"id": "e0", "kind": "embedding", "ctx_position": 0},
        {"id": "f1", "kind": "feature", "layer": 1, "feature_index": 7, "ctx_position": 1, "influence": 0.5},
        {"id": "L", "kind": "logit", "ctx_position": 1}
      ],
      "edges": [
        {"src": "e0", "dst": "f1", "weight": 1.5},
        {"src": "f1", "dst": "L", "weight": -2.0}
      ]
    }"#;

    #[test]
    fn parses_minimal_graph() {
        let g = parse_graph(MINIMAL.as_bytes(), GraphFormat::Json).unwrap();
        assert_eq!(g.nodes().len(), 3);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.features().count(), 1);
        assert_eq!(g.logit().id.as_str(), "L");
        assert_eq!(g.header().prompt_text(), "a b");
    }

    #[test]
    fn dangling_edge_names_the_missing_id() {
        let text = MINIMAL.replace(r#""dst": "L""#, r#""dst": "f_999""#);
        let err = parse_graph(text.as_bytes(), GraphFormat::Json).unwrap_err();
        assert_eq!(err, GraphError::DanglingEdge("f_999".into()));
    }

    #[test]
    fn cycle_is_rejected() {
        let g = AttributionGraph::new(
            header(4, &["a"]),
            vec![
                node("e", NodeKind::Embedding),
                feature("x", 0, 1, 0, 0.0),
                feature("y", 1, 2, 0, 0.0),
                node("L", NodeKind::Logit),
            ],
            vec![edge("e", "x", 1.0), edge("x", "y", 1.0), edge("y", "x", 1.0), edge("y", "L", 1.0)],
        );
        assert!(matches!(g, Err(GraphError::Cycle(_))));
    }

    #[test]
    fn schema_errors() {
        let missing_kind = MINIMAL.replace(r#""kind": "logit","#, "");
        assert!(matches!(parse_graph(missing_kind.as_bytes(), GraphFormat::Json), Err(GraphError::Schema(_))));
        let bad_layer = MINIMAL.replace(r#""layer": 1"#, r#""layer": 9"#);
        assert!(matches!(parse_graph(bad_layer.as_bytes(), GraphFormat::Json), Err(GraphError::Schema(_))));
        let bad_pos = MINIMAL.replace(r#""ctx_position": 1, "influence""#, r#""ctx_position": 5, "influence""#);
        assert!(matches!(parse_graph(bad_pos.as_bytes(), GraphFormat::Json), Err(GraphError::Schema(_))));
        assert!(matches!(parse_graph(b"\xff\xfe", GraphFormat::Json), Err(GraphError::Schema(_))));
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let text = MINIMAL
            .replace(r#""target_logit": " c""#, r#""target_logit": " c", "slug": "dallas""#)
            .replace(r#""influence": 0.5"#, r#""influence": 0.5, "clerp": "texas things""#);
        let g = parse_graph(text.as_bytes(), GraphFormat::Json).unwrap();
        assert_eq!(g.header().extra["slug"], Value::String("dallas".into()));
        let again = parse_graph(g.to_json_string().as_bytes(), GraphFormat::Json).unwrap();
        assert_eq!(g, again);
        assert!(again.to_json_string().contains("texas things"));
    }

    #[test]
    fn normalization_examples() {
        let g = AttributionGraph::new(
            header(4, &["a"]),
            vec![
                node("e1", NodeKind::Embedding),
                node("e2", NodeKind::Embedding),
                feature("sym", 1, 1, 0, 0.0),
                feature("single", 1, 2, 0, 0.0),
                feature("skew", 1, 3, 0, 0.0),
                node("L", NodeKind::Logit),
            ],
            vec![
                edge("e1", "sym", 2.0),
                edge("e2", "sym", -2.0),
                edge("e1", "single", -7.0),
                edge("e1", "skew", 3.0),
                edge("e2", "skew", 1.0),
                edge("skew", "L", 1.0),
            ],
        )
        .unwrap();
        let m = normalize_incoming(&g);
        let fr = |id: &str| -> Vec<f64> { m.row(g.index_of(&id.into()).unwrap()).iter().map(|&(_, f)| f).collect() };
        assert_eq!(fr("sym"), vec![0.5, 0.5]);
        assert_eq!(fr("single"), vec![1.0]);
        assert_eq!(fr("skew"), vec![0.75, 0.25]);
        assert!(fr("e1").is_empty());
        assert_eq!(m.signed_row(g.index_of(&"single".into()).unwrap()), &[-7.0]);
    }

    #[test]
    fn zero_weight_parents_give_empty_row_with_warning() {
        let g = AttributionGraph::new(
            header(4, &["a"]),
            vec![node("e", NodeKind::Embedding), node("L", NodeKind::Logit)],
            vec![edge("e", "L", 0.0)],
        )
        .unwrap();
        let m = normalize_incoming(&g);
        assert!(m.row(g.logit_index()).is_empty());
        assert_eq!(m.warnings().len(), 1);
    }
}
