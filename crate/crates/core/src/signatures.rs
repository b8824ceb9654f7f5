// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-probe activation records and per-feature cross-prompt signatures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LexiconError, SignatureError};
use crate::graph::NodeId;
use crate::lexicon::{
    display_token, label_tokens, map_target, normalize_token, FunctionalVocabulary, MappingRule, TargetMapping,
    TokenRole,
};

/// Common length for cross-prompt cosine comparisons.
pub const RESAMPLE_LEN: usize = 32;
const MAD_SCALE: f64 = 1.4826;

/// Robust location and scale of a feature's pooled activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub median: f64,
    pub mad: f64,
}

impl BaselineStats {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { median: 0.0, mad: 0.0 };
        }
        let median = median(values);
        let dev: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
        Self { median, mad: self::median(&dev) }
    }
}

/// Median with the mean of the middle two for even counts. NaN-free input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Percentile `q` in [0, 1] with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Resample to `len` points by linear interpolation over a common [0, 1] axis.
pub fn resample(values: &[f64], len: usize) -> Vec<f64> {
    match values.len() {
        0 => vec![0.0; len],
        1 => vec![values[0]; len],
        n => (0..len)
            .map(|i| {
                let x = if len == 1 { 0.0 } else { i as f64 * (n - 1) as f64 / (len - 1) as f64 };
                let lo = (x.floor() as usize).min(n - 1);
                let hi = (lo + 1).min(n - 1);
                values[lo] + (x - lo as f64) * (values[hi] - values[lo])
            })
            .collect(),
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub feature: NodeId,
    pub probe_id: String,
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
    pub cosine_to_seed: f64,
    pub robust_z: f64,
    pub peak_position: usize,
    /// Display form of the token at the peak.
    pub peak_token: String,
    pub density: f64,
    pub sparsity: f64,
}

impl ActivationRecord {
    pub fn peak(&self) -> f64 {
        self.activations[self.peak_position]
    }

    pub fn resampled(&self) -> Vec<f64> {
        resample(&self.activations, RESAMPLE_LEN)
    }
}

fn check_activations(values: &[f64]) -> Result<(), SignatureError> {
    if values.is_empty() {
        return Err(SignatureError::EmptyActivations);
    }
    match values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(i) => Err(SignatureError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `(peak - mean) / peak`, or 0 for an all-zero vector.
pub fn sparsity_ratio(values: &[f64]) -> f64 {
    let peak = values[argmax(values)];
    if peak <= 0.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    ((peak - mean) / peak).clamp(0.0, 1.0)
}

/// Fraction of entries strictly above the vector's own 75th percentile.
pub fn density(values: &[f64]) -> f64 {
    let p75 = percentile(values, 0.75);
    values.iter().filter(|&&v| v > p75).count() as f64 / values.len() as f64
}

pub fn compute_record(
    feature: NodeId,
    probe_id: impl Into<String>,
    activations: &[f64],
    probe_tokens: &[String],
    seed_activations: &[f64],
    baseline: BaselineStats,
) -> Result<ActivationRecord, SignatureError> {
    if activations.len() != probe_tokens.len() {
        return Err(SignatureError::LengthMismatch { activations: activations.len(), tokens: probe_tokens.len() });
    }
    check_activations(activations)?;
    let peak_position = argmax(activations);
    let peak = activations[peak_position];
    let robust_z = if baseline.mad > 0.0 { (peak - baseline.median) / (MAD_SCALE * baseline.mad) } else { 0.0 };
    Ok(ActivationRecord {
        feature,
        probe_id: probe_id.into(),
        tokens: probe_tokens.to_vec(),
        activations: activations.to_vec(),
        cosine_to_seed: cosine(&resample(activations, RESAMPLE_LEN), &resample(seed_activations, RESAMPLE_LEN)),
        robust_z,
        peak_position,
        peak_token: display_token(&probe_tokens[peak_position]),
        density: density(activations),
        sparsity: sparsity_ratio(activations),
    })
}

/// Peak summary of one probe, the unit the classifier's stability check runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePeak {
    pub probe_id: String,
    /// Normalized peak token.
    pub peak_token: String,
    pub peak_display: String,
    pub peak_role: TokenRole,
    /// Normalized mapped target; `None` when no semantic token is in reach.
    pub target: Option<String>,
    pub target_display: Option<String>,
    pub rule: MappingRule,
    pub sparsity: f64,
}

/// Label a record's tokens and map its peak to a semantic target.
pub fn observe(
    record: &ActivationRecord,
    vocab: &FunctionalVocabulary,
    window: usize,
) -> Result<(ProbePeak, TargetMapping), LexiconError> {
    let roles = label_tokens(&record.tokens, vocab)?;
    let mapping = map_target(&record.tokens, &roles, record.peak_position, window, vocab)?;
    let peak = ProbePeak {
        probe_id: record.probe_id.clone(),
        peak_token: normalize_token(&record.tokens[record.peak_position]),
        peak_display: record.peak_token.clone(),
        peak_role: roles[record.peak_position],
        target: mapping.normalized_target(),
        target_display: mapping.target_token.clone(),
        rule: mapping.rule_fired,
        sparsity: record.sparsity,
    };
    Ok((peak, mapping))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub feature: NodeId,
    pub layer: u32,
    pub peak_consistency: f64,
    pub n_distinct_peaks: usize,
    pub func_vs_sem: f64,
    pub semantic_conf: f64,
    pub conf_functional: f64,
    pub median_sparsity: f64,
    /// Normalized modal peak token.
    pub modal_peak_token: String,
    pub modal_peak_display: String,
    /// Normalized modal target over functional-peak probes.
    pub modal_target_token: Option<String>,
    pub modal_target_display: Option<String>,
    /// Modal peak among semantic-peak probes only.
    pub modal_semantic_token: Option<String>,
    pub modal_semantic_display: Option<String>,
    pub n_probes: usize,
    /// Share of probes whose peak role equals the modal role.
    pub role_consistency: f64,
    pub mean_cosine_to_seed: f64,
    pub mean_density: f64,
    /// Per-probe peaks, sorted by probe id.
    pub probes: Vec<ProbePeak>,
}

/// Mode with ties broken toward the lexicographically smallest value.
fn mode<'a>(items: impl Iterator<Item = &'a str>) -> Option<(&'a str, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for it in items {
        *counts.entry(it).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (k, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregate per-probe records of one feature into its signature.
///
/// `peaks` must hold one entry per record with matching probe ids.
pub fn aggregate_signature(
    layer: u32,
    records: &[ActivationRecord],
    peaks: &[ProbePeak],
) -> Result<Signature, SignatureError> {
    let first = records.first().ok_or(SignatureError::EmptyRecordSet)?;
    if let Some(other) = records.iter().find(|r| r.feature != first.feature) {
        return Err(SignatureError::MixedFeature(first.feature.to_string(), other.feature.to_string()));
    }
    let mut recs: Vec<&ActivationRecord> = records.iter().collect();
    recs.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    let by_id: BTreeMap<&str, &ProbePeak> = peaks.iter().map(|p| (p.probe_id.as_str(), p)).collect();
    let probes: Vec<ProbePeak> = recs
        .iter()
        .map(|r| {
            by_id
                .get(r.probe_id.as_str())
                .map(|p| (*p).clone())
                .ok_or_else(|| SignatureError::MixedFeature(r.feature.to_string(), r.probe_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let n = probes.len();

    let (modal_peak, modal_count) = mode(probes.iter().map(|p| p.peak_token.as_str())).expect("non-empty");
    let modal_peak = modal_peak.to_owned();
    let display_of = |key: &str, f: fn(&ProbePeak) -> (&str, Option<&str>)| {
        probes.iter().find_map(|p| {
            let (k, d) = f(p);
            (k == key).then(|| d.unwrap_or(k).to_owned())
        })
    };
    let modal_peak_display =
        display_of(&modal_peak, |p| (&p.peak_token, Some(&p.peak_display))).unwrap_or_else(|| modal_peak.clone());
    let n_distinct_peaks =
        probes.iter().map(|p| p.peak_token.as_str()).collect::<std::collections::BTreeSet<_>>().len();

    let functional: Vec<&ProbePeak> = probes.iter().filter(|p| p.peak_role == TokenRole::Functional).collect();
    let semantic: Vec<&ProbePeak> = probes.iter().filter(|p| p.peak_role == TokenRole::Semantic).collect();

    let sem_mode = mode(semantic.iter().map(|p| p.peak_token.as_str()));
    let semantic_conf = fraction(sem_mode.map_or(0, |m| m.1), semantic.len());
    let modal_semantic_token = sem_mode.map(|m| m.0.to_owned());
    let modal_semantic_display = modal_semantic_token
        .as_deref()
        .and_then(|k| semantic.iter().find(|p| p.peak_token == k).map(|p| p.peak_display.clone()));

    let tgt_mode = mode(functional.iter().filter_map(|p| p.target.as_deref()));
    let conf_functional = fraction(tgt_mode.map_or(0, |m| m.1), functional.len());
    let modal_target_token = tgt_mode.map(|m| m.0.to_owned());
    let modal_target_display = modal_target_token.as_deref().and_then(|k| {
        functional.iter().find(|p| p.target.as_deref() == Some(k)).and_then(|p| p.target_display.clone())
    });

    let sparsities: Vec<f64> = recs.iter().map(|r| r.sparsity).collect();
    let n_func = functional.len();
    let role_consistency = fraction(n_func.max(n - n_func), n);

    Ok(Signature {
        feature: first.feature.clone(),
        layer,
        peak_consistency: fraction(modal_count, n),
        n_distinct_peaks,
        func_vs_sem: fraction(n_func, n),
        semantic_conf,
        conf_functional,
        median_sparsity: median(&sparsities),
        modal_peak_token: modal_peak,
        modal_peak_display,
        modal_target_token,
        modal_target_display,
        modal_semantic_token,
        modal_semantic_display,
        n_probes: n,
        role_consistency,
        mean_cosine_to_seed: recs.iter().map(|r| r.cosine_to_seed).sum::<f64>() / n as f64,
        mean_density: recs.iter().map(|r| r.density).sum::<f64>() / n as f64,
        probes,
    })
}
