// SPDX-License-Identifier: MIT OR Apache-2.0

//! Geometric baseline groupings: agglomerative clustering on cosine distance
//! of activation vectors, and Ward clustering on normalized (layer, influence).

use serde::{Deserialize, Serialize};

use crate::coherence::euclidean;
use crate::error::ClusterError;
use crate::graph::NodeId;
use crate::signatures::cosine;

pub const DEFAULT_N_CLUSTERS: usize = 8;
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Single,
    Complete,
    Average,
    Ward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    CosineAgglomerative,
    LayerAdjacencyWard,
}

impl BaselineMethod {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineMethod::CosineAgglomerative => "baseline:cosine",
            BaselineMethod::LayerAdjacencyWard => "baseline:layer_adjacency",
        }
    }

    pub fn default_linkage(self) -> Linkage {
        match self {
            BaselineMethod::CosineAgglomerative => Linkage::Average,
            BaselineMethod::LayerAdjacencyWard => Linkage::Ward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub n_clusters: usize,
    pub linkage: Linkage,
}

impl BaselineConfig {
    /// Cluster count matches the concept-aligned grouping when known.
    pub fn new(method: BaselineMethod, concept_groups: Option<usize>) -> Self {
        Self {
            method,
            n_clusters: concept_groups.filter(|&k| k >= 2).unwrap_or(DEFAULT_N_CLUSTERS),
            linkage: method.default_linkage(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Representative (smallest) id of each merged cluster.
    pub left: NodeId,
    pub right: NodeId,
    /// Linkage distance; for Ward the increase in within-cluster SSE.
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Groups sorted by representative id, members sorted.
    pub groups: Vec<Vec<NodeId>>,
    pub merges: Vec<Merge>,
    pub warnings: Vec<String>,
}

fn linkage_distance(a: &[usize], b: &[usize], d: &[Vec<f64>], points: &[Vec<f64>], linkage: Linkage) -> f64 {
    let pairs = || a.iter().flat_map(|&i| b.iter().map(move |&j| d[i][j]));
    match linkage {
        Linkage::Single => pairs().fold(f64::INFINITY, f64::min),
        Linkage::Complete => pairs().fold(f64::NEG_INFINITY, f64::max),
        Linkage::Average => pairs().sum::<f64>() / (a.len() * b.len()) as f64,
        Linkage::Ward => {
            let centroid = |m: &[usize]| {
                let mut c = vec![0.0; points[0].len()];
                for &i in m {
                    for (ci, v) in c.iter_mut().zip(&points[i]) {
                        *ci += v;
                    }
                }
                c.iter_mut().for_each(|ci| *ci /= m.len() as f64);
                c
            };
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let dist = euclidean(&centroid(a), &centroid(b));
            na * nb / (na + nb) * dist * dist
        }
    }
}

/// Deterministic agglomerative clustering down to `n_clusters` groups.
///
/// Equal-distance candidates are ordered by the pair of cluster
/// representatives (smallest member id), lexicographically.
pub fn agglomerate(
    ids: &[NodeId],
    points: &[Vec<f64>],
    metric: Metric,
    linkage: Linkage,
    n_clusters: usize,
) -> Result<Clustering, ClusterError> {
    if n_clusters == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if n_clusters > ids.len() {
        return Err(ClusterError::TooManyClusters { n_clusters, n_features: ids.len() });
    }
    if linkage == Linkage::Ward && metric != Metric::Euclidean {
        return Err(ClusterError::WardNeedsEuclidean);
    }
    if let Some(i) = points.iter().position(|p| p.len() != points[0].len()) {
        return Err(ClusterError::DimensionMismatch(ids[i].to_string()));
    }
    let n = ids.len();
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match metric {
                    Metric::Cosine => 1.0 - cosine(&points[i], &points[j]),
                    Metric::Euclidean => euclidean(&points[i], &points[j]),
                })
                .collect()
        })
        .collect();

    let rep = |m: &[usize]| m.iter().map(|&i| &ids[i]).min().expect("non-empty").clone();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut merges = Vec::new();
    while clusters.len() > n_clusters {
        let reps: Vec<NodeId> = clusters.iter().map(|c| rep(c)).collect();
        let mut best: Option<(f64, NodeId, NodeId, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let dist = linkage_distance(&clusters[i], &clusters[j], &d, points, linkage);
                let (lo, hi) = if reps[i] <= reps[j] {
                    (reps[i].clone(), reps[j].clone())
                } else {
                    (reps[j].clone(), reps[i].clone())
                };
                let better = match &best {
                    None => true,
                    Some((bd, bl, bh, _, _)) => {
                        dist < bd - TIE_EPS || ((dist - bd).abs() <= TIE_EPS && (&lo, &hi) < (bl, bh))
                    }
                };
                if better {
                    best = Some((dist, lo, hi, i, j));
                }
            }
        }
        let (dist, left, right, i, j) = best.expect("at least two clusters");
        let absorbed = clusters.remove(j);
        clusters[i].extend(absorbed);
        merges.push(Merge { left, right, distance: dist, size: clusters[i].len() });
    }

    let mut groups: Vec<Vec<NodeId>> = clusters
        .into_iter()
        .map(|c| {
            let mut m: Vec<NodeId> = c.into_iter().map(|i| ids[i].clone()).collect();
            m.sort();
            m
        })
        .collect();
    groups.sort();
    Ok(Clustering { groups, merges, warnings: Vec::new() })
}

/// Agglomerative clustering on cosine distance of activation vectors.
///
/// All-zero vectors have no direction; they are set aside as one extra group
/// and the rest is clustered into `n_clusters - 1` groups.
pub fn cluster_cosine(
    items: &[(NodeId, Vec<f64>)],
    n_clusters: usize,
    linkage: Linkage,
) -> Result<Clustering, ClusterError> {
    if n_clusters == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if n_clusters > items.len() {
        return Err(ClusterError::TooManyClusters { n_clusters, n_features: items.len() });
    }
    let (zero, live): (Vec<_>, Vec<_>) = items.iter().partition(|(_, v)| v.iter().all(|x| *x == 0.0));
    let ids: Vec<NodeId> = live.iter().map(|(id, _)| id.clone()).collect();
    let points: Vec<Vec<f64>> = live.iter().map(|(_, v)| v.clone()).collect();
    let target = if zero.is_empty() { n_clusters } else { (n_clusters - 1).max(1) };
    let mut out = if ids.is_empty() {
        Clustering { groups: Vec::new(), merges: Vec::new(), warnings: Vec::new() }
    } else {
        agglomerate(&ids, &points, Metric::Cosine, linkage, target.min(ids.len()))?
    };
    if !zero.is_empty() {
        let mut q: Vec<NodeId> = zero.iter().map(|(id, _)| id.clone()).collect();
        q.sort();
        let msg = format!("{} zero activation vectors quarantined into their own group", q.len());
        tracing::warn!("{msg}");
        out.warnings.push(msg);
        out.groups.push(q);
        out.groups.sort();
    }
    Ok(out)
}

/// Ward clustering on min-max normalized (layer, influence) coordinates.
pub fn cluster_layer_adjacency(
    items: &[(NodeId, u32, f64)],
    n_clusters: usize,
    linkage: Linkage,
) -> Result<Clustering, ClusterError> {
    let norm = |vals: Vec<f64>| -> (Vec<f64>, bool) {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // NaN-safe: an empty or constant range is degenerate.
        let degenerate = hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater);
        (vals.iter().map(|v| if degenerate { 0.0 } else { (v - lo) / (hi - lo) }).collect(), degenerate)
    };
    let (layers, dl) = norm(items.iter().map(|(_, l, _)| f64::from(*l)).collect());
    let (infl, di) = norm(items.iter().map(|(_, _, i)| *i).collect());
    let ids: Vec<NodeId> = items.iter().map(|(id, _, _)| id.clone()).collect();
    if dl && di && !items.is_empty() {
        if n_clusters == 0 {
            return Err(ClusterError::ZeroClusters);
        }
        let msg = "all layers and influences identical; returning a single group".to_owned();
        tracing::warn!("{msg}");
        let mut g = ids;
        g.sort();
        return Ok(Clustering { groups: vec![g], merges: Vec::new(), warnings: vec![msg] });
    }
    let points: Vec<Vec<f64>> = layers.into_iter().zip(infl).map(|(l, i)| vec![l, i]).collect();
    agglomerate(&ids, &points, Metric::Euclidean, linkage, n_clusters)
}
