// SPDX-License-Identifier: MIT OR Apache-2.0

//! Entity-swap transfer between two circuits that share a feature dictionary.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::Supernode;
use crate::error::{IoError, TransferError};
use crate::graph::{AttributionGraph, NodeId};
use crate::lexicon::normalize_token;
use crate::signatures::{cosine, ActivationRecord};

pub const TRANSFERRED_ABOVE: f64 = 0.80;
pub const FAILED_BELOW: f64 = 0.50;

/// Token substitutions between circuit A and circuit B, e.g. Texas → California.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityMap {
    pub swaps: BTreeMap<String, String>,
}

impl EntityMap {
    pub fn from_yaml_str(text: &str) -> Result<Self, IoError> {
        Ok(serde_yaml::from_str(text)?)
    }

    pub fn inverted(&self) -> Self {
        Self { swaps: self.swaps.iter().map(|(k, v)| (v.clone(), k.clone())).collect() }
    }

    fn lookup(&self, normalized: &str) -> Option<String> {
        self.swaps.iter().find(|(k, _)| normalize_token(k) == normalized).map(|(_, v)| normalize_token(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub a: NodeId,
    pub b: NodeId,
    pub layer: u32,
    pub feature_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<FeatureMatch>,
    pub unmatched_a: Vec<NodeId>,
    pub unmatched_b: Vec<NodeId>,
}

/// Pair features on identical `(layer, feature_index)`. When B holds the
/// same feature at several positions, its highest-influence node is used.
/// `universe_a` restricts the A side (e.g. to the grouped features).
pub fn match_features(
    a: &AttributionGraph,
    b: &AttributionGraph,
    universe_a: Option<&BTreeSet<NodeId>>,
) -> Result<MatchResult, TransferError> {
    if a.header().model != b.header().model {
        return Err(TransferError::ModelMismatch(a.header().model.clone(), b.header().model.clone()));
    }
    let mut best_b: BTreeMap<(u32, u64), (f64, &NodeId)> = BTreeMap::new();
    for f in b.features() {
        let key = (f.layer, f.feature_index);
        let replace = match best_b.get(&key) {
            None => true,
            Some((inf, id)) => f.influence > *inf || (f.influence == *inf && f.id < *id),
        };
        if replace {
            best_b.insert(key, (f.influence, f.id));
        }
    }
    let mut pairs = Vec::new();
    let mut unmatched_a = Vec::new();
    let mut used_b = BTreeSet::new();
    for f in a.features() {
        if universe_a.is_some_and(|u| !u.contains(f.id)) {
            continue;
        }
        match best_b.get(&(f.layer, f.feature_index)) {
            Some((_, bid)) => {
                used_b.insert((*bid).clone());
                pairs.push(FeatureMatch {
                    a: f.id.clone(),
                    b: (*bid).clone(),
                    layer: f.layer,
                    feature_index: f.feature_index,
                });
            }
            None => unmatched_a.push(f.id.clone()),
        }
    }
    pairs.sort_by(|x, y| x.a.cmp(&y.a));
    unmatched_a.sort();
    let mut unmatched_b: Vec<NodeId> = b.features().map(|f| f.id.clone()).filter(|id| !used_b.contains(id)).collect();
    unmatched_b.sort();
    Ok(MatchResult { pairs, unmatched_a, unmatched_b })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferClass {
    Transferred,
    Partial,
    Failed,
}

pub fn class_for_overlap(overlap: f64) -> TransferClass {
    if overlap > TRANSFERRED_ABOVE {
        TransferClass::Transferred
    } else if overlap < FAILED_BELOW {
        TransferClass::Failed
    } else {
        TransferClass::Partial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub a: NodeId,
    pub b: NodeId,
    pub layer: u32,
    pub class: TransferClass,
    pub overlap: f64,
    /// Set for transferred pairs only.
    pub entity_appropriate: Option<bool>,
    /// Probes whose B peak equals the substituted A peak (transferred only).
    pub peak_matches: Option<usize>,
    pub n_probes: usize,
}

fn sorted(records: &[ActivationRecord]) -> Vec<&ActivationRecord> {
    let mut r: Vec<&ActivationRecord> = records.iter().collect();
    r.sort_by(|x, y| x.probe_id.cmp(&y.probe_id));
    r
}

fn concat(records: &[&ActivationRecord]) -> Vec<f64> {
    records.iter().flat_map(|r| r.resampled()).collect()
}

fn modal(tokens: &[String]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut best: (&str, usize) = ("", 0);
    for (k, c) in counts {
        if c > best.1 {
            best = (k, c);
        }
    }
    best.0.to_owned()
}

/// Expected B-side token for an A-side peak token.
fn expected_peak(a_token: &str, b_vocab: &BTreeSet<String>, map: &EntityMap) -> Result<String, TransferError> {
    if let Some(mapped) = map.lookup(a_token) {
        return Ok(mapped);
    }
    if b_vocab.contains(a_token) {
        Ok(a_token.to_owned())
    } else {
        Err(TransferError::MissingEntityMap(a_token.to_owned()))
    }
}

/// Compare one matched pair probe by probe.
pub fn transfer_classify(
    a: &[ActivationRecord],
    b: &[ActivationRecord],
    map: &EntityMap,
) -> Result<PairOutcome, TransferError> {
    let (ra, rb) = (sorted(a), sorted(b));
    let a_id = ra.first().map(|r| r.feature.clone()).ok_or(TransferError::EmptyPairSet)?;
    let b_id = rb.first().map(|r| r.feature.clone()).ok_or(TransferError::EmptyPairSet)?;
    if ra.len() != rb.len() {
        return Err(TransferError::ProbeCountMismatch(a_id.to_string(), ra.len(), rb.len()));
    }
    let overlap = cosine(&concat(&ra), &concat(&rb));
    let class = class_for_overlap(overlap);

    let (mut entity_appropriate, mut peak_matches) = (None, None);
    if class == TransferClass::Transferred {
        let peak = |r: &ActivationRecord| normalize_token(&r.tokens[r.peak_position]);
        let a_peaks: Vec<String> = ra.iter().map(|r| peak(r)).collect();
        let b_peaks: Vec<String> = rb.iter().map(|r| peak(r)).collect();
        let b_vocab: BTreeSet<String> = rb.iter().flat_map(|r| r.tokens.iter().map(|t| normalize_token(t))).collect();
        let mut matches = 0;
        for (pa, pb) in a_peaks.iter().zip(&b_peaks) {
            if expected_peak(pa, &b_vocab, map)? == *pb {
                matches += 1;
            }
        }
        entity_appropriate = Some(expected_peak(&modal(&a_peaks), &b_vocab, map)? == modal(&b_peaks));
        peak_matches = Some(matches);
    }
    Ok(PairOutcome { a: a_id, b: b_id, layer: 0, class, overlap, entity_appropriate, peak_matches, n_probes: ra.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub n_total: usize,
    pub n_transferred: usize,
    pub n_failed: usize,
    pub n_partial: usize,
    pub transferred_fraction: f64,
    pub mean_layer_transferred: Option<f64>,
    pub sd_layer_transferred: Option<f64>,
    pub mean_layer_failed: Option<f64>,
    pub sd_layer_failed: Option<f64>,
    pub layer_delta: Option<f64>,
    pub mean_overlap_transferred: Option<f64>,
    /// Pooled over all probes of transferred features.
    pub peak_token_consistency_transferred: Option<f64>,
    /// Mean of per-feature peak agreement, transferred features only.
    pub peak_token_consistency_per_feature: Option<f64>,
    pub entity_appropriate_fraction: Option<f64>,
    pub pairs: Vec<PairOutcome>,
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn transfer_report(outcomes: &[PairOutcome]) -> Result<TransferReport, TransferError> {
    if outcomes.is_empty() {
        return Err(TransferError::EmptyPairSet);
    }
    let of = |c: TransferClass| outcomes.iter().filter(move |o| o.class == c);
    let layers = |c: TransferClass| of(c).map(|o| f64::from(o.layer)).collect::<Vec<_>>();
    let t = mean_sd(&layers(TransferClass::Transferred));
    let f = mean_sd(&layers(TransferClass::Failed));
    let transferred: Vec<&PairOutcome> = of(TransferClass::Transferred).collect();
    let n_t = transferred.len();
    let avg = |v: Vec<f64>| mean_sd(&v).map(|(m, _)| m);

    let probes: usize = transferred.iter().map(|o| o.n_probes).sum();
    let hits: usize = transferred.iter().filter_map(|o| o.peak_matches).sum();
    Ok(TransferReport {
        n_total: outcomes.len(),
        n_transferred: n_t,
        n_failed: of(TransferClass::Failed).count(),
        n_partial: of(TransferClass::Partial).count(),
        transferred_fraction: n_t as f64 / outcomes.len() as f64,
        mean_layer_transferred: t.map(|x| x.0),
        sd_layer_transferred: t.map(|x| x.1),
        mean_layer_failed: f.map(|x| x.0),
        sd_layer_failed: f.map(|x| x.1),
        layer_delta: t.zip(f).map(|(t, f)| f.0 - t.0),
        mean_overlap_transferred: avg(transferred.iter().map(|o| o.overlap).collect()),
        peak_token_consistency_transferred: (probes > 0).then(|| hits as f64 / probes as f64),
        peak_token_consistency_per_feature: avg(transferred
            .iter()
            .filter_map(|o| o.peak_matches.map(|m| m as f64 / o.n_probes.max(1) as f64))
            .collect()),
        entity_appropriate_fraction: avg(transferred
            .iter()
            .filter_map(|o| o.entity_appropriate.map(|e| if e { 1.0 } else { 0.0 }))
            .collect()),
        pairs: outcomes.to_vec(),
    })
}

/// Match, classify and summarize in one pass.
pub fn analyze_transfer(
    graph_a: &AttributionGraph,
    graph_b: &AttributionGraph,
    universe_a: &BTreeSet<NodeId>,
    records_a: &BTreeMap<NodeId, Vec<ActivationRecord>>,
    records_b: &BTreeMap<NodeId, Vec<ActivationRecord>>,
    map: &EntityMap,
) -> Result<(MatchResult, TransferReport), TransferError> {
    let matches = match_features(graph_a, graph_b, Some(universe_a))?;
    let mut outcomes = Vec::with_capacity(matches.pairs.len());
    for m in &matches.pairs {
        let ra = records_a.get(&m.a).map(Vec::as_slice).unwrap_or(&[]);
        let rb = records_b.get(&m.b).map(Vec::as_slice).unwrap_or(&[]);
        if ra.len() != rb.len() || ra.is_empty() {
            return Err(TransferError::ProbeCountMismatch(m.a.to_string(), ra.len(), rb.len()));
        }
        let mut o = transfer_classify(ra, rb, map)?;
        o.layer = m.layer;
        outcomes.push(o);
    }
    let report = transfer_report(&outcomes)?;
    Ok((matches, report))
}

/// Supernode-by-supernode overlap matrix: mean pairwise activation cosine
/// between members of a row supernode (circuit A) and a column supernode (B).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IoError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["supernode".to_owned()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn supernode_heatmap(
    supernodes_a: &[Supernode],
    supernodes_b: &[Supernode],
    records_a: &BTreeMap<NodeId, Vec<ActivationRecord>>,
    records_b: &BTreeMap<NodeId, Vec<ActivationRecord>>,
) -> Heatmap {
    let vec_of = |recs: &BTreeMap<NodeId, Vec<ActivationRecord>>, id: &NodeId| recs.get(id).map(|r| concat(&sorted(r)));
    let values = supernodes_a
        .iter()
        .map(|sa| {
            supernodes_b
                .iter()
                .map(|sb| {
                    let mut total = 0.0;
                    let mut n = 0;
                    for ma in &sa.members {
                        for mb in &sb.members {
                            if let (Some(va), Some(vb)) = (vec_of(records_a, ma), vec_of(records_b, mb)) {
                                if va.len() == vb.len() {
                                    total += cosine(&va, &vb);
                                    n += 1;
                                }
                            }
                        }
                    }
                    if n == 0 {
                        0.0
                    } else {
                        total / n as f64
                    }
                })
                .collect()
        })
        .collect();
    Heatmap {
        rows: supernodes_a.iter().map(|s| s.name.clone()).collect(),
        cols: supernodes_b.iter().map(|s| s.name.clone()).collect(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{edge, feature, header, node};
    use crate::graph::NodeKind;
    use crate::signatures::{compute_record, BaselineStats};
    use proptest::prelude::*;

    fn rec(feature: &str, probe: &str, tokens: &[&str], acts: &[f64]) -> ActivationRecord {
        let t: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        compute_record(feature.into(), probe, acts, &t, acts, BaselineStats { median: 0.0, mad: 0.0 }).unwrap()
    }

    fn texas_map() -> EntityMap {
        EntityMap::from_yaml_str("swaps: {Texas: California, Dallas: Oakland, Austin: Sacramento}\n").unwrap()
    }

    #[test]
    fn identical_patterns_modulo_entity_transfer() {
        let a = vec![rec("a", "p0", &["The", " capital", " of", " Texas"], &[0.0, 0.1, 0.0, 2.0])];
        let b = vec![rec("b", "p0", &["The", " capital", " of", " California"], &[0.0, 0.1, 0.0, 2.0])];
        let o = transfer_classify(&a, &b, &texas_map()).unwrap();
        assert!((o.overlap - 1.0).abs() < 1e-12);
        assert_eq!(o.class, TransferClass::Transferred);
        assert_eq!(o.entity_appropriate, Some(true));
    }

    #[test]
    fn orthogonal_patterns_fail() {
        let a = vec![rec("a", "p0", &["x", "y"], &[1.0, 0.0])];
        let b = vec![rec("b", "p0", &["x", "y"], &[0.0, 1.0])];
        // Resampling spreads mass, so the two ramps are far from parallel.
        let o = transfer_classify(&a, &b, &EntityMap::default()).unwrap();
        assert!(o.overlap < 0.5);
        assert_eq!(o.class, TransferClass::Failed);
        assert_eq!(o.entity_appropriate, None);
    }

    #[test]
    fn swapped_peak_needs_the_map() {
        let a = vec![rec("a", "p0", &[" is", " Austin"], &[0.0, 1.0])];
        let b = vec![rec("b", "p0", &[" is", " Sacramento"], &[0.0, 1.0])];
        assert_eq!(
            transfer_classify(&a, &b, &EntityMap::default()),
            Err(TransferError::MissingEntityMap("austin".into()))
        );
        let o = transfer_classify(&a, &b, &texas_map()).unwrap();
        assert_eq!(o.entity_appropriate, Some(true));
    }

    #[test]
    fn bands() {
        assert_eq!(class_for_overlap(0.81), TransferClass::Transferred);
        assert_eq!(class_for_overlap(0.80), TransferClass::Partial);
        assert_eq!(class_for_overlap(0.50), TransferClass::Partial);
        assert_eq!(class_for_overlap(0.49), TransferClass::Failed);
    }

    fn outcome(layer: u32, class: TransferClass) -> PairOutcome {
        PairOutcome {
            a: "a".into(),
            b: "b".into(),
            layer,
            class,
            overlap: 0.9,
            entity_appropriate: Some(true),
            peak_matches: Some(1),
            n_probes: 1,
        }
    }

    #[test]
    fn report_arithmetic() {
        use TransferClass::*;
        let r = transfer_report(&[
            outcome(2, Transferred),
            outcome(4, Transferred),
            outcome(10, Failed),
            outcome(12, Failed),
        ])
        .unwrap();
        assert_eq!(r.mean_layer_transferred, Some(3.0));
        assert_eq!(r.mean_layer_failed, Some(11.0));
        assert_eq!(r.layer_delta, Some(8.0));
        assert_eq!(r.sd_layer_transferred, Some(1.0));
        assert_eq!(r.n_total, r.n_transferred + r.n_failed + r.n_partial);
    }

    #[test]
    fn empty_failed_set_leaves_delta_absent() {
        let r = transfer_report(&[outcome(5, TransferClass::Transferred)]).unwrap();
        assert_eq!(r.layer_delta, None);
        assert_eq!(r.mean_layer_failed, None);
        assert_eq!(transfer_report(&[]), Err(TransferError::EmptyPairSet));
    }

    fn tiny(model: &str, feats: &[(&str, u32, u64, f64)]) -> AttributionGraph {
        let mut nodes = vec![node("e", NodeKind::Embedding), node("L", NodeKind::Logit)];
        let mut edges = Vec::new();
        for &(id, l, i, inf) in feats {
            nodes.push(feature(id, l, i, 0, inf));
            edges.push(edge("e", id, 1.0));
            edges.push(edge(id, "L", 1.0));
        }
        let mut h = header(30, &["x"]);
        h.model = model.into();
        AttributionGraph::new(h, nodes, edges).unwrap()
    }

    #[test]
    fn matching() {
        let a = tiny("m", &[("a1", 1, 10, 0.5), ("a2", 2, 20, 0.5)]);
        let m = match_features(&a, &a, None).unwrap();
        assert!(m.pairs.iter().all(|p| p.a == p.b));
        let b = tiny("m", &[("b1", 1, 11, 0.5)]);
        let m = match_features(&a, &b, None).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_a.len(), 2);
        let c = tiny("other", &[]);
        assert!(matches!(match_features(&a, &c, None), Err(TransferError::ModelMismatch(..))));
        let d = tiny("m", &[("lo", 1, 10, 0.1), ("hi", 1, 10, 0.9)]);
        let m = match_features(&a, &d, None).unwrap();
        assert_eq!(m.pairs[0].b, NodeId::from("hi"));
    }

    proptest! {
        #[test]
        fn symmetric_partition_and_scale_invariance(
            xs in prop::collection::vec(0.0f64..5.0, 3),
            ys in prop::collection::vec(0.0f64..5.0, 3),
            c in 0.1f64..10.0,
        ) {
            prop_assume!(xs.iter().any(|v| *v > 0.0) && ys.iter().any(|v| *v > 0.0));
            let a = vec![rec("a", "p0", &[" is", " Austin", " Texas"], &xs)];
            let b = vec![rec("b", "p0", &[" is", " Sacramento", " California"], &ys)];
            let m = texas_map();
            let ab = transfer_classify(&a, &b, &m).unwrap();
            let ba = transfer_classify(&b, &a, &m.inverted()).unwrap();
            prop_assert_eq!(ab.class, ba.class);
            let scaled: Vec<f64> = xs.iter().map(|v| v * c).collect();
            let a2 = vec![rec("a", "p0", &[" is", " Austin", " Texas"], &scaled)];
            let s = transfer_classify(&a2, &b, &m).unwrap();
            prop_assert!((s.overlap - ab.overlap).abs() < 1e-9);
        }
    }
}
