// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random small DAGs and path-enumeration definitions of the graph scores.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probegraph_core::graph::{AttributionGraph, Edge, GraphHeader, Node, NodeId, NodeKind};

pub fn node(id: String, kind: NodeKind, layer: Option<u32>) -> Node {
    let feature = kind == NodeKind::Feature;
    Node {
        id: NodeId::new(id),
        kind,
        layer,
        feature_index: feature.then_some(1),
        ctx_position: Some(0),
        influence: feature.then_some(0.1),
        label: None,
        extra: BTreeMap::new(),
    }
}

pub struct Case {
    pub graph: AttributionGraph,
    pub pinned: BTreeSet<NodeId>,
}

/// Random DAG over at most 8 nodes: embeddings and errors first, then
/// features, the logit last. Edges only run forward.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8usize);
    let n_emb = rng.gen_range(1..=2usize.min(n - 2));
    let n_err = rng.gen_range(0..=(n - 1 - n_emb).min(2));
    let n_feat = n - 1 - n_emb - n_err;
    let mut nodes = Vec::new();
    for i in 0..n_emb {
        nodes.push(node(format!("e{i}"), NodeKind::Embedding, None));
    }
    for i in 0..n_err {
        nodes.push(node(format!("x{i}"), NodeKind::Error, None));
    }
    for i in 0..n_feat {
        nodes.push(node(format!("f{i}"), NodeKind::Feature, Some(i as u32)));
    }
    nodes.push(node("L".into(), NodeKind::Logit, None));

    let mut edges = Vec::new();
    for dst in n_emb + n_err..n {
        let mut has_parent = false;
        for src in 0..dst {
            if nodes[src].kind == NodeKind::Logit {
                continue;
            }
            if rng.gen_bool(0.5) {
                let mag = rng.gen_range(0.05..3.0);
                let w = if rng.gen_bool(0.25) { -mag } else { mag };
                edges.push(edge(&nodes[src].id, &nodes[dst].id, w));
                has_parent = true;
            }
        }
        if !has_parent {
            let src = rng.gen_range(0..n_emb);
            edges.push(edge(&nodes[src].id, &nodes[dst].id, rng.gen_range(0.05..3.0)));
        }
    }
    // Everything reaches the logit at least through one edge.
    for src in 0..n - 1 {
        if !edges.iter().any(|e| e.src == nodes[src].id) {
            edges.push(edge(&nodes[src].id, &nodes[n - 1].id, rng.gen_range(0.05..3.0)));
        }
    }
    let pinned: BTreeSet<NodeId> =
        nodes.iter().filter(|n| n.kind == NodeKind::Feature && rng.gen_bool(0.5)).map(|n| n.id.clone()).collect();
    let header = GraphHeader {
        model: "m".into(),
        n_layers: 8,
        prompt_tokens: vec!["t".into()],
        target_logit: " y".into(),
        extra: BTreeMap::new(),
    };
    Case { graph: AttributionGraph::new(header, nodes, edges).expect("valid DAG"), pinned }
}

pub fn edge(src: &NodeId, dst: &NodeId, weight: f64) -> Edge {
    Edge { src: src.clone(), dst: dst.clone(), weight, extra: BTreeMap::new() }
}

/// |w(u, v)| over the total absolute weight into v.
pub fn frac(g: &AttributionGraph, u: &NodeId, v: &NodeId) -> f64 {
    let into: Vec<&Edge> = g.edges().iter().filter(|e| &e.dst == v).collect();
    let total: f64 = into.iter().map(|e| e.weight.abs()).sum();
    into.iter().filter(|e| &e.src == u).map(|e| e.weight.abs()).sum::<f64>() / total
}

/// Sum over every path from `u` to the logit whose interior nodes pass `ok`.
pub fn paths(g: &AttributionGraph, u: &NodeId, ok: &dyn Fn(&Node) -> bool) -> f64 {
    let logit = &g.logit().id;
    if u == logit {
        return 1.0;
    }
    let kids: BTreeSet<&NodeId> = g.edges().iter().filter(|e| &e.src == u).map(|e| &e.dst).collect();
    kids.into_iter()
        .filter(|v| *v == logit || ok(g.node(v).expect("known")))
        .map(|v| frac(g, u, v) * paths(g, v, ok))
        .sum()
}

pub fn brute_replacement(c: &Case) -> f64 {
    let g = &c.graph;
    let has_parents = |id: &NodeId| g.edges().iter().any(|e| &e.dst == id);
    let total: f64 = g
        .nodes()
        .iter()
        .filter(|n| n.kind != NodeKind::Logit && !has_parents(&n.id))
        .map(|n| paths(g, &n.id, &|_| true))
        .sum();
    let through = |n: &Node| n.kind == NodeKind::Feature && c.pinned.contains(&n.id);
    let kept: f64 = g.embeddings().map(|n| paths(g, &n.id, &through)).sum();
    (kept / total).clamp(0.0, 1.0)
}

pub fn brute_completeness(c: &Case, uniform: bool) -> f64 {
    let g = &c.graph;
    let in_sub = |n: &Node| match n.kind {
        NodeKind::Embedding | NodeKind::Logit => true,
        NodeKind::Feature => c.pinned.contains(&n.id),
        NodeKind::Error => false,
    };
    let (mut num, mut den) = (0.0, 0.0);
    for v in g.nodes().iter().filter(|n| in_sub(n)) {
        let parents: Vec<&NodeId> = g.edges().iter().filter(|e| e.dst == v.id).map(|e| &e.src).collect();
        let explained = if parents.is_empty() {
            1.0
        } else {
            let uniq: BTreeSet<&NodeId> = parents.into_iter().collect();
            uniq.into_iter()
                .filter(|p| {
                    let n = g.node(p).expect("known");
                    in_sub(n) && n.kind != NodeKind::Logit
                })
                .map(|p| frac(g, p, &v.id))
                .sum()
        };
        let w = if uniform { 1.0 } else { paths(g, &v.id, &|_| true) };
        num += w * explained;
        den += w;
    }
    (num / den).clamp(0.0, 1.0)
}
