// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cumulative-influence selection of candidate feature nodes.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{IoError, SelectionError};
use crate::graph::{AttributionGraph, FeatureNode, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rank: usize,
    pub node_id: NodeId,
    pub influence: f64,
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub tau: f64,
    /// Selected feature ids, by descending influence.
    pub selected: Vec<NodeId>,
    /// One point per feature node in ranked order (rank is 1-based).
    pub cumulative_curve: Vec<CurvePoint>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Curve as CSV `rank,node_id,influence,cumulative`.
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<(), IoError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "node_id", "influence", "cumulative"])?;
        for p in &self.cumulative_curve {
            w.write_record([
                p.rank.to_string(),
                p.node_id.to_string(),
                p.influence.to_string(),
                p.cumulative_fraction.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Total order used to rank features: influence descending, then
/// `(layer, feature_index, ctx_position)` ascending.
pub fn rank_order(a: &FeatureNode<'_>, b: &FeatureNode<'_>) -> Ordering {
    b.influence
        .partial_cmp(&a.influence)
        .unwrap_or(Ordering::Equal)
        .then(a.layer.cmp(&b.layer))
        .then(a.feature_index.cmp(&b.feature_index))
        .then(a.ctx_position.cmp(&b.ctx_position))
        .then(a.id.cmp(b.id))
}

/// Select the minimal influence-ranked prefix of feature nodes whose
/// cumulative normalized influence reaches `tau`.
///
/// The denominator is the summed influence of feature nodes only. `tau = 0`
/// still selects the single top-ranked feature.
pub fn select_nodes_by_cumulative_influence(
    graph: &AttributionGraph,
    tau: f64,
) -> Result<SelectionResult, SelectionError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(SelectionError::TauOutOfRange(tau));
    }
    let mut features: Vec<FeatureNode<'_>> = graph.features().collect();
    if features.is_empty() {
        return Err(SelectionError::NoFeatures);
    }
    if let Some(bad) = features.iter().find(|f| !f.influence.is_finite()) {
        return Err(SelectionError::NonFiniteInfluence(bad.id.to_string()));
    }
    features.sort_by(rank_order);

    let total: f64 = features.iter().map(|f| f.influence).sum();
    let mut curve = Vec::with_capacity(features.len());
    let mut running = 0.0;
    for (i, f) in features.iter().enumerate() {
        running += f.influence;
        let cumulative_fraction = if total > 0.0 { running / total } else { 0.0 };
        curve.push(CurvePoint { rank: i + 1, node_id: f.id.clone(), influence: f.influence, cumulative_fraction });
    }
    // Float drift must not leave the tail below 1: everything from the last
    // nonzero feature onward is exactly 1.
    if total > 0.0 {
        let last_nonzero = features.iter().rposition(|f| f.influence > 0.0).unwrap_or(0);
        for p in &mut curve[last_nonzero..] {
            p.cumulative_fraction = 1.0;
        }
    }

    let cutoff = if total <= 0.0 {
        1
    } else if tau >= 1.0 {
        // Full prefix of nonzero-influence features.
        features.iter().filter(|f| f.influence > 0.0).count().max(1)
    } else {
        curve.iter().position(|p| p.cumulative_fraction >= tau).map_or(curve.len(), |i| i + 1).max(1)
    };

    Ok(SelectionResult {
        tau,
        selected: features[..cutoff].iter().map(|f| f.id.clone()).collect(),
        cumulative_curve: curve,
    })
}
