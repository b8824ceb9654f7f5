// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV import and export for activations, signatures, groupings and reports.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineMethod, Clustering};
use crate::classifier::{Category, NameProvenance, Supernode};
use crate::coherence::GroupingEvaluation;
use crate::error::IoError;
use crate::graph::NodeId;
use crate::signatures::{ActivationRecord, Signature};

impl std::str::FromStr for Category {
    type Err = IoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Category::SayX,
            Category::SemanticDictionary,
            Category::SemanticConcept,
            Category::Relationship,
            Category::Ungrouped,
        ]
        .into_iter()
        .find(|c| c.label().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| IoError::Invalid(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ActivationRow {
    feature_id: String,
    layer: u32,
    probe_id: String,
    token_index: usize,
    token: String,
    activation: f64,
}

/// Raw per-(feature, probe) activations as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawActivation {
    pub feature: NodeId,
    pub layer: u32,
    pub probe_id: String,
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

/// One row per (feature, probe, token).
pub fn write_activations_csv<'a, W: Write>(
    rows: impl IntoIterator<Item = (u32, &'a ActivationRecord)>,
    out: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for (layer, r) in rows {
        for (i, (tok, a)) in r.tokens.iter().zip(&r.activations).enumerate() {
            w.serialize(ActivationRow {
                feature_id: r.feature.to_string(),
                layer,
                probe_id: r.probe_id.clone(),
                token_index: i,
                token: tok.clone(),
                activation: *a,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_raw_activations_csv<W: Write>(rows: &[RawActivation], out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        for (i, (tok, a)) in r.tokens.iter().zip(&r.values).enumerate() {
            w.serialize(ActivationRow {
                feature_id: r.feature.to_string(),
                layer: r.layer,
                probe_id: r.probe_id.clone(),
                token_index: i,
                token: tok.clone(),
                activation: *a,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the activation CSV back, grouped by (feature, probe) in file order.
pub fn read_activations_csv<R: Read>(input: R) -> Result<Vec<RawActivation>, IoError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<RawActivation> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    for row in rdr.deserialize::<ActivationRow>() {
        let row = row?;
        let key = (row.feature_id.clone(), row.probe_id.clone());
        let slot = *index.entry(key).or_insert_with(|| {
            out.push(RawActivation {
                feature: NodeId::new(row.feature_id.clone()),
                layer: row.layer,
                probe_id: row.probe_id.clone(),
                tokens: Vec::new(),
                values: Vec::new(),
            });
            out.len() - 1
        });
        let entry = &mut out[slot];
        if row.token_index != entry.tokens.len() {
            return Err(IoError::Invalid(format!(
                "token_index {} out of order for {}/{}",
                row.token_index, row.feature_id, row.probe_id
            )));
        }
        entry.tokens.push(row.token);
        entry.values.push(row.activation);
    }
    Ok(out)
}

pub fn write_signatures_csv<W: Write>(signatures: &[Signature], out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "feature_id",
        "layer",
        "peak_consistency",
        "n_distinct_peaks",
        "func_vs_sem",
        "semantic_conf",
        "conf_functional",
        "median_sparsity",
        "modal_peak_token",
        "modal_target_token",
        "n_probes",
        "role_consistency",
        "mean_cosine_to_seed",
        "mean_density",
    ])?;
    for s in signatures {
        w.write_record([
            s.feature.to_string(),
            s.layer.to_string(),
            format!("{:.6}", s.peak_consistency),
            s.n_distinct_peaks.to_string(),
            format!("{:.6}", s.func_vs_sem),
            format!("{:.6}", s.semantic_conf),
            format!("{:.6}", s.conf_functional),
            format!("{:.6}", s.median_sparsity),
            s.modal_peak_display.clone(),
            s.modal_target_display.clone().unwrap_or_default(),
            s.n_probes.to_string(),
            format!("{:.6}", s.role_consistency),
            format!("{:.6}", s.mean_cosine_to_seed),
            format!("{:.6}", s.mean_density),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingRow {
    pub feature_id: NodeId,
    pub layer: u32,
    pub category: String,
    pub supernode_name: String,
    #[serde(default)]
    pub alignment_score: Option<f64>,
    #[serde(default)]
    pub stability: Option<f64>,
    #[serde(default)]
    pub reason: String,
}

pub fn read_grouping_csv<R: Read>(input: R) -> Result<Vec<GroupingRow>, IoError> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().map(|r| r.map_err(IoError::from)).collect()
}

/// Rebuild supernodes from grouping rows. Rows without a supernode name are
/// ungrouped and skipped; category columns that are not classifier labels
/// (e.g. baseline tags) map to `Ungrouped`.
pub fn supernodes_from_rows(rows: &[GroupingRow]) -> Vec<Supernode> {
    let mut by_name: BTreeMap<&str, (Category, Vec<NodeId>)> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| !r.supernode_name.is_empty()) {
        let cat = r.category.parse().unwrap_or(Category::Ungrouped);
        let e = by_name.entry(&r.supernode_name).or_insert_with(|| {
            order.push(&r.supernode_name);
            (cat, Vec::new())
        });
        e.1.push(r.feature_id.clone());
    }
    order
        .into_iter()
        .map(|name| {
            let (category, mut members) = by_name.remove(name).expect("present");
            members.sort();
            Supernode { name: name.to_owned(), category, members, name_provenance: NameProvenance::Manual }
        })
        .collect()
}

/// Baseline groupings in the same shape as the classifier grouping CSV.
pub fn write_baseline_grouping_csv<W: Write>(
    method: BaselineMethod,
    clustering: &Clustering,
    layers: &BTreeMap<NodeId, u32>,
    out: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["feature_id", "layer", "category", "supernode_name", "alignment_score", "stability", "reason"])?;
    for (k, g) in clustering.groups.iter().enumerate() {
        for id in g {
            w.write_record([
                id.to_string(),
                layers.get(id).map(u32::to_string).unwrap_or_default(),
                method.tag().to_owned(),
                format!("cluster_{k}"),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-form evaluation table: `method,metric,value`.
pub fn write_evaluation_csv<W: Write>(results: &[(String, GroupingEvaluation)], out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "metric", "value"])?;
    for (method, e) in results {
        for (metric, v) in [
            ("peak_token_consistency", e.peak_token_consistency),
            ("activation_pattern_similarity", e.activation_pattern_similarity),
            ("sparsity_consistency", e.sparsity_consistency),
            ("silhouette", e.silhouette),
            ("davies_bouldin", e.davies_bouldin),
        ] {
            w.write_record([method.as_str(), metric, &format!("{v:.6}")])?;
        }
    }
    w.flush()?;
    Ok(())
}
