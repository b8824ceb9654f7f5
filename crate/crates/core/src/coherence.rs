// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioral coherence and geometric quality of a feature grouping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::Supernode;
use crate::error::ClusterError;
use crate::graph::NodeId;
use crate::signatures::{cosine, resample, ActivationRecord, Signature, RESAMPLE_LEN};

/// Everything the evaluation needs about one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProfile {
    pub id: NodeId,
    pub layer: u32,
    pub influence: f64,
    pub signature: Signature,
    /// Per-probe records, any order.
    pub records: Vec<ActivationRecord>,
}

impl FeatureProfile {
    fn sorted_records(&self) -> Vec<&ActivationRecord> {
        let mut r: Vec<&ActivationRecord> = self.records.iter().collect();
        r.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
        r
    }

    /// Per-probe resampled activations concatenated in probe-id order.
    pub fn concatenated(&self) -> Vec<f64> {
        self.sorted_records().iter().flat_map(|r| r.resampled()).collect()
    }

    /// Mean of the per-probe resampled activation vectors.
    pub fn mean_resampled(&self) -> Vec<f64> {
        let recs = self.sorted_records();
        let mut out = vec![0.0; RESAMPLE_LEN];
        for r in &recs {
            for (o, v) in out.iter_mut().zip(resample(&r.activations, RESAMPLE_LEN)) {
                *o += v;
            }
        }
        if !recs.is_empty() {
            out.iter_mut().for_each(|o| *o /= recs.len() as f64);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// Mean of `1 - median_sparsity`: lower means more concentrated.
    #[default]
    Diffuseness,
    /// Population variance of member median sparsities within each group.
    WithinGroupVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingEvaluation {
    pub peak_token_consistency: f64,
    pub activation_pattern_similarity: f64,
    pub sparsity_consistency: f64,
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub n_groups: usize,
    pub n_features: usize,
    /// Groups that contributed similarity 1.0 by the singleton convention.
    pub singleton_groups: usize,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette over all points. Singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, ClusterError> {
    let n_labels = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if n_labels < 2 || points.len() < 2 {
        return Err(ClusterError::SingletonGrouping);
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in (0..points.len()).filter(|&j| j != i) {
            let e = sums.entry(labels[j]).or_default();
            e.0 += euclidean(&points[i], &points[j]);
            e.1 += 1;
        }
        let Some(&(own_sum, own_n)) = sums.get(&labels[i]) else { continue };
        let a = own_sum / own_n as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

/// Davies-Bouldin index; coincident centroids contribute 0.
pub fn davies_bouldin(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, ClusterError> {
    let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (p, l) in points.iter().zip(labels) {
        groups.entry(*l).or_default().push(p);
    }
    if groups.len() < 2 {
        return Err(ClusterError::SingletonGrouping);
    }
    let dim = points[0].len();
    let stats: Vec<(Vec<f64>, f64)> = groups
        .values()
        .map(|members| {
            let mut c = vec![0.0; dim];
            for m in members {
                for (ci, v) in c.iter_mut().zip(m.iter()) {
                    *ci += v;
                }
            }
            c.iter_mut().for_each(|ci| *ci /= members.len() as f64);
            let s = members.iter().map(|m| euclidean(m, &c)).sum::<f64>() / members.len() as f64;
            (c, s)
        })
        .collect();
    let k = stats.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let d = euclidean(&stats[i].0, &stats[j].0);
            if d > 0.0 {
                worst = worst.max((stats[i].1 + stats[j].1) / d);
            }
        }
        total += worst;
    }
    Ok(total / k as f64)
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Points in the shared evaluation space: min-max normalized layer and
/// influence followed by the mean activation profile scaled by the
/// universe-wide maximum. Indexed like `profiles`.
pub fn evaluation_space(profiles: &[&FeatureProfile]) -> Vec<Vec<f64>> {
    let layers = min_max(&profiles.iter().map(|p| f64::from(p.layer)).collect::<Vec<_>>());
    let infl = min_max(&profiles.iter().map(|p| p.influence).collect::<Vec<_>>());
    let means: Vec<Vec<f64>> = profiles.iter().map(|p| p.mean_resampled()).collect();
    let scale = means.iter().flatten().copied().fold(0.0, f64::max);
    profiles
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let mut v = vec![layers[i], infl[i]];
            v.extend(means[i].iter().map(|x| if scale > 0.0 { x / scale } else { 0.0 }));
            v
        })
        .collect()
}

pub fn groups_from_supernodes(supernodes: &[Supernode]) -> Vec<Vec<NodeId>> {
    supernodes.iter().map(|s| s.members.clone()).collect()
}

fn modal_share<'a>(tokens: impl Iterator<Item = &'a str>) -> (usize, usize) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n = 0;
    for t in tokens {
        *counts.entry(t).or_default() += 1;
        n += 1;
    }
    (counts.values().copied().max().unwrap_or(0), n)
}

/// Evaluate a grouping over the feature universe in `profiles`.
///
/// The evaluation space is built from the grouped features only, so two
/// groupings over the same feature set share one space.
pub fn evaluate_grouping(
    groups: &[Vec<NodeId>],
    profiles: &BTreeMap<NodeId, FeatureProfile>,
    mode: SparsityMode,
) -> Result<GroupingEvaluation, ClusterError> {
    let mut members: Vec<Vec<&FeatureProfile>> = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(ClusterError::EmptyGroup(gi));
        }
        let mut ms = g
            .iter()
            .map(|id| profiles.get(id).ok_or_else(|| ClusterError::MissingMember(id.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        ms.sort_by(|a, b| a.id.cmp(&b.id));
        members.push(ms);
    }
    let n: usize = members.iter().map(Vec::len).sum();
    let weight = |g: &[&FeatureProfile]| g.len() as f64 / n as f64;

    let mut ptc = 0.0;
    let mut sim = 0.0;
    let mut spar = 0.0;
    let mut singleton_groups = 0;
    for g in &members {
        let (top, total) = modal_share(g.iter().flat_map(|p| p.signature.probes.iter().map(|q| q.peak_token.as_str())));
        ptc += weight(g) * if total > 0 { top as f64 / total as f64 } else { 0.0 };

        let vecs: Vec<Vec<f64>> = g.iter().map(|p| p.concatenated()).collect();
        let group_sim = if vecs.len() < 2 {
            singleton_groups += 1;
            1.0
        } else {
            let mut s = 0.0;
            let mut c = 0;
            for i in 0..vecs.len() {
                for j in i + 1..vecs.len() {
                    s += cosine(&vecs[i], &vecs[j]);
                    c += 1;
                }
            }
            s / c as f64
        };
        sim += weight(g) * group_sim;

        let ms: Vec<f64> = g.iter().map(|p| p.signature.median_sparsity).collect();
        let mean = ms.iter().sum::<f64>() / ms.len() as f64;
        spar += weight(g)
            * match mode {
                SparsityMode::Diffuseness => 1.0 - mean,
                SparsityMode::WithinGroupVariance => {
                    ms.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / ms.len() as f64
                }
            };
    }

    // Sorted by id so the space does not depend on group or member order.
    let mut flat: Vec<(&FeatureProfile, usize)> =
        members.iter().enumerate().flat_map(|(gi, g)| g.iter().map(move |p| (*p, gi))).collect();
    flat.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let profiles_flat: Vec<&FeatureProfile> = flat.iter().map(|(p, _)| *p).collect();
    let points = evaluation_space(&profiles_flat);
    let labels: Vec<usize> = flat.iter().map(|(_, g)| *g).collect();

    Ok(GroupingEvaluation {
        peak_token_consistency: ptc,
        activation_pattern_similarity: sim,
        sparsity_consistency: spar,
        silhouette: silhouette(&points, &labels)?,
        davies_bouldin: davies_bouldin(&points, &labels)?,
        n_groups: members.len(),
        n_features: n,
        singleton_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Silhouette written directly from the definition, one point at a time.
    fn brute_silhouette(p: &[Vec<f64>], l: &[usize]) -> f64 {
        let n = p.len();
        let mut s = 0.0;
        for i in 0..n {
            let own: Vec<usize> = (0..n).filter(|&j| j != i && l[j] == l[i]).collect();
            if own.is_empty() {
                continue;
            }
            let a = own.iter().map(|&j| euclidean(&p[i], &p[j])).sum::<f64>() / own.len() as f64;
            let mut b = f64::INFINITY;
            for other in l.iter().copied().filter(|&k| k != l[i]) {
                let js: Vec<usize> = (0..n).filter(|&j| l[j] == other).collect();
                let d = js.iter().map(|&j| euclidean(&p[i], &p[j])).sum::<f64>() / js.len() as f64;
                b = b.min(d);
            }
            if a.max(b) > 0.0 {
                s += (b - a) / a.max(b);
            }
        }
        s / n as f64
    }

    #[test]
    fn two_tight_groups_in_one_dimension() {
        let p = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let l = vec![0, 0, 1, 1];
        let s = silhouette(&p, &l).unwrap();
        // a = 0.1 for all; b = 10.05, 9.95, 9.95, 10.05
        let expect = ((10.05 - 0.1) / 10.05 * 2.0 + (9.95 - 0.1) / 9.95 * 2.0) / 4.0;
        assert!((s - expect).abs() < 1e-9);
        // S = 0.05 each, centroid distance 10
        assert!((davies_bouldin(&p, &l).unwrap() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn single_group_is_an_error() {
        let p = vec![vec![0.0], vec![1.0]];
        assert_eq!(silhouette(&p, &[0, 0]), Err(ClusterError::SingletonGrouping));
        assert_eq!(davies_bouldin(&p, &[0, 0]), Err(ClusterError::SingletonGrouping));
    }

    proptest! {
        #[test]
        fn silhouette_matches_definition(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 2..12),
            labels_seed in prop::collection::vec(0usize..4, 12),
        ) {
            let l: Vec<usize> = labels_seed[..pts.len()].to_vec();
            prop_assume!(l.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
            let s = silhouette(&pts, &l).unwrap();
            prop_assert!((s - brute_silhouette(&pts, &l)).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
