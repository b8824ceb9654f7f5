// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layered attribution graphs with tunable error and off-subgraph shares.
//!
//! The structure (who feeds whom) is drawn once from the seed. Six shares
//! then set the edge weights:
//!
//! - `e_feat`: fraction of a pinned feature's input that comes from its layer's error node;
//! - `e_unpinned`: the same for unpinned features;
//! - `e_logit`: the logit's error fraction;
//! - `u_pinned`: fraction of a pinned feature's input from unpinned features;
//! - `w_logit`: fraction of the logit's input from unpinned features;
//! - `emb`: direct token share of a feature that also has lower pinned parents.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probegraph_core::graph::{AttributionGraph, Edge, GraphHeader, Node, NodeId, NodeKind};
use probegraph_core::metrics::{score_graph, CompletenessWeighting, PinnedSubgraph};

pub const MODEL: &str = "gemma-2-2b";
pub const N_LAYERS: u32 = 26;

#[derive(Debug, Clone)]
pub struct FeatureSpec {
    pub layer: u32,
    pub index: u64,
    pub pos: u32,
    /// Influence attribute written to the node; drives selection.
    pub influence: f64,
    pub pinned: bool,
    pub label: Option<String>,
}

impl FeatureSpec {
    pub fn id(&self) -> NodeId {
        feature_id(self.layer, self.index, self.pos)
    }
}

pub fn feature_id(layer: u32, index: u64, pos: u32) -> NodeId {
    NodeId::new(format!("{layer}_{index}_{pos}"))
}

#[derive(Debug, Clone)]
pub struct GraphSpec {
    pub prompt_tokens: Vec<String>,
    pub target: String,
    pub features: Vec<FeatureSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knobs {
    pub e_feat: f64,
    pub e_unpinned: f64,
    pub e_logit: f64,
    pub u_pinned: f64,
    pub w_logit: f64,
    /// Direct token share of a feature that also has lower pinned parents.
    pub emb: f64,
}

impl Knobs {
    fn to_vec(self) -> [f64; N_KNOBS] {
        [self.e_feat, self.e_logit, self.u_pinned, self.w_logit, self.emb, self.e_unpinned]
    }

    fn from_vec(v: [f64; N_KNOBS]) -> Self {
        let c = |x: f64| x.clamp(0.0, 0.95);
        Self {
            e_feat: c(v[0]),
            e_logit: c(v[1]),
            u_pinned: c(v[2]),
            w_logit: c(v[3]),
            emb: v[4].clamp(0.05, 1.0),
            e_unpinned: c(v[5]),
        }
    }
}

/// `(replacement full, replacement sub, completeness full, completeness sub)`.
pub type ScoreRow = [f64; 4];

/// Parent lists split by role, fixed for a spec.
struct Structure {
    /// Per feature: lower pinned features with relative weights.
    clean: Vec<Vec<(usize, f64)>>,
    /// Per feature: embedding position used for the direct token edge.
    embedding: Vec<u32>,
    /// Per pinned feature: lower unpinned parents with relative weights.
    unpinned: Vec<Vec<(usize, f64)>>,
    logit_pinned: Vec<(usize, f64)>,
    logit_unpinned: Vec<(usize, f64)>,
    /// Edges drawn with a negative sign.
    negative: BTreeSet<(usize, usize)>,
    scale: Vec<f64>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [usize], k: usize) -> Vec<&'a usize> {
    pool.choose_multiple(rng, k.min(pool.len())).collect()
}

fn structure(spec: &GraphSpec) -> Structure {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = &spec.features;
    let n = f.len();
    let n_tokens = spec.prompt_tokens.len() as u32;
    let pinned: Vec<usize> = (0..n).filter(|&i| f[i].pinned).collect();
    // Unpinned features with real weight (influence above the tail) feed more.
    let mut heavy: Vec<usize> = (0..n).filter(|&i| !f[i].pinned).collect();
    heavy.sort_by(|&a, &b| f[b].influence.total_cmp(&f[a].influence).then(a.cmp(&b)));
    let heavy_set: Vec<usize> = heavy.iter().copied().take(4).collect();
    let tail: Vec<usize> = heavy.iter().copied().skip(4).collect();

    let mut clean = Vec::with_capacity(n);
    let mut embedding = Vec::with_capacity(n);
    let mut unpinned = Vec::with_capacity(n);
    let mut negative = BTreeSet::new();
    for v in 0..n {
        let lower: Vec<usize> = pinned.iter().copied().filter(|&p| f[p].layer < f[v].layer).collect();
        let parents: Vec<(usize, f64)> =
            pick(&mut rng, &lower, 3).into_iter().map(|&p| (p, rng.gen_range(0.5..1.5))).collect();
        for &(p, _) in &parents {
            if rng.gen_bool(0.12) {
                negative.insert((p, v));
            }
        }
        clean.push(parents);
        embedding.push(if f[v].pos < n_tokens { f[v].pos } else { rng.gen_range(0..n_tokens) });
        if f[v].pinned {
            let h: Vec<usize> = heavy_set.iter().copied().filter(|&p| f[p].layer < f[v].layer).collect();
            let t: Vec<usize> = tail.iter().copied().filter(|&p| f[p].layer < f[v].layer).collect();
            let mut ups: Vec<(usize, f64)> = Vec::new();
            let h_share = if t.is_empty() {
                1.0
            } else if h.is_empty() {
                0.0
            } else {
                0.7
            };
            for &p in &h {
                ups.push((p, h_share / h.len() as f64));
            }
            let chosen = pick(&mut rng, &t, 3);
            let nt = chosen.len();
            for &p in chosen {
                ups.push((p, (1.0 - h_share) / nt as f64));
            }
            unpinned.push(ups);
        } else {
            unpinned.push(Vec::new());
        }
    }
    // Logit reads from the upper half of the pinned layers.
    let mut by_layer = pinned.clone();
    by_layer.sort_by_key(|&p| f[p].layer);
    let top: Vec<usize> = by_layer[by_layer.len() / 2..].to_vec();
    let logit_pinned = top.iter().map(|&p| (p, rng.gen_range(0.5..1.5))).collect();
    let mut logit_unpinned: Vec<(usize, f64)> = heavy_set.iter().map(|&p| (p, 1.0)).collect();
    for &p in pick(&mut rng, &tail, 5) {
        logit_unpinned.push((p, 0.1));
    }
    let scale = (0..n).map(|_| rng.gen_range(2.0..20.0)).collect();
    Structure { clean, embedding, unpinned, logit_pinned, logit_unpinned, negative, scale }
}

fn normalized(parts: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let total: f64 = parts.iter().map(|p| p.1).sum();
    parts.iter().map(|&(i, w)| (i, w / total)).collect()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn build_with(spec: &GraphSpec, s: &Structure, k: Knobs) -> AttributionGraph {
    let f = &spec.features;
    let header = GraphHeader {
        model: MODEL.into(),
        n_layers: N_LAYERS,
        prompt_tokens: spec.prompt_tokens.clone(),
        target_logit: spec.target.clone(),
        extra: BTreeMap::new(),
    };
    let plain = |id: String, kind: NodeKind| Node {
        id: NodeId::new(id),
        kind,
        layer: None,
        feature_index: None,
        ctx_position: None,
        influence: None,
        label: None,
        extra: BTreeMap::new(),
    };
    let mut nodes = Vec::new();
    for (i, t) in spec.prompt_tokens.iter().enumerate() {
        let mut n = plain(format!("E_{i}"), NodeKind::Embedding);
        n.ctx_position = Some(i as u32);
        n.label = Some(t.clone());
        nodes.push(n);
    }
    for l in 0..N_LAYERS {
        let mut n = plain(format!("err_{l}"), NodeKind::Error);
        n.layer = Some(l);
        nodes.push(n);
    }
    nodes.push(plain("err_logit".into(), NodeKind::Error));
    for fs in f {
        nodes.push(Node {
            id: fs.id(),
            kind: NodeKind::Feature,
            layer: Some(fs.layer),
            feature_index: Some(fs.index),
            ctx_position: Some(fs.pos),
            influence: Some(fs.influence),
            label: fs.label.clone(),
            extra: BTreeMap::new(),
        });
    }
    nodes.push(plain("logit".into(), NodeKind::Logit));
    let mut logit_node = nodes.pop().expect("pushed");
    logit_node.label = Some(spec.target.clone());
    nodes.push(logit_node);

    let mut edges = Vec::new();
    let mut edge = |src: NodeId, dst: NodeId, w: f64| {
        let w = round6(w);
        if w != 0.0 {
            edges.push(Edge { src, dst, weight: w, extra: BTreeMap::new() });
        }
    };
    for (v, fs) in f.iter().enumerate() {
        let dst = fs.id();
        let sc = s.scale[v];
        let ups = normalized(&s.unpinned[v]);
        let u = if ups.is_empty() { 0.0 } else { k.u_pinned };
        let e = if fs.pinned { k.e_feat } else { k.e_unpinned };
        let clean_share = 1.0 - e - u;
        let lower = normalized(&s.clean[v]);
        let emb_share = if lower.is_empty() { 1.0 } else { k.emb };
        edge(NodeId::new(format!("E_{}", s.embedding[v])), dst.clone(), sc * clean_share * emb_share);
        for (p, w) in lower {
            let sign = if s.negative.contains(&(p, v)) { -1.0 } else { 1.0 };
            edge(f[p].id(), dst.clone(), sign * sc * clean_share * (1.0 - emb_share) * w);
        }
        for (p, w) in ups {
            edge(f[p].id(), dst.clone(), sc * u * w);
        }
        edge(NodeId::new(format!("err_{}", fs.layer)), dst.clone(), sc * e);
    }
    let logit = NodeId::new("logit");
    let lp = normalized(&s.logit_pinned);
    let lu = normalized(&s.logit_unpinned);
    let pinned_share = 1.0 - k.e_logit - k.w_logit;
    for (p, w) in lp {
        edge(f[p].id(), logit.clone(), 10.0 * pinned_share * w);
    }
    for (p, w) in lu {
        edge(f[p].id(), logit.clone(), 10.0 * k.w_logit * w);
    }
    edge(NodeId::new("err_logit"), logit, 10.0 * k.e_logit);
    AttributionGraph::new(header, nodes, edges).expect("generated graph is valid")
}

/// Graph for fixed shares, no calibration.
pub fn build(spec: &GraphSpec, k: Knobs) -> AttributionGraph {
    build_with(spec, &structure(spec), k)
}

pub fn pinned_ids(spec: &GraphSpec) -> Vec<NodeId> {
    spec.features.iter().filter(|f| f.pinned).map(FeatureSpec::id).collect()
}

pub fn score_row(g: &AttributionGraph, pinned: &[NodeId]) -> ScoreRow {
    let w = CompletenessWeighting::Influence;
    let full = score_graph(g, &PinnedSubgraph::all_features(g), w).expect("scorable");
    let sub = score_graph(g, &PinnedSubgraph::new(g, pinned).expect("known ids"), w).expect("scorable");
    [full.replacement, sub.replacement, full.completeness, sub.completeness]
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: [[f64; N_KNOBS]; N_KNOBS], mut b: [f64; N_KNOBS]) -> Option<[f64; N_KNOBS]> {
    for c in 0..N_KNOBS {
        let p = (c..N_KNOBS).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..N_KNOBS {
            if r != c {
                let factor = a[r][c] / a[c][c];
                let pivot = a[c];
                for (x, p) in a[r][c..].iter_mut().zip(&pivot[c..]) {
                    *x -= factor * p;
                }
                b[r] -= factor * b[c];
            }
        }
    }
    let mut x = [0.0; N_KNOBS];
    for i in 0..N_KNOBS {
        x[i] = b[i] / a[i][i];
    }
    Some(x)
}

const N_KNOBS: usize = 6;

/// Coarse grid start, then Levenberg-Marquardt on the knobs until the scores
/// match `target`.
pub fn calibrate(spec: &GraphSpec, target: ScoreRow) -> anyhow::Result<(AttributionGraph, Knobs, ScoreRow)> {
    let s = structure(spec);
    let pinned = pinned_ids(spec);
    let eval = |k: Knobs| score_row(&build_with(spec, &s, k), &pinned);
    let resid = |r: ScoreRow| [r[0] - target[0], r[1] - target[1], r[2] - target[2], r[3] - target[3]];
    let sq = |r: [f64; 4]| r.iter().map(|x| x * x).sum::<f64>();
    let norm = |r: [f64; 4]| r.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let grid = [0.05, 0.15, 0.3];
    let mut k = Knobs { e_feat: 0.1, e_unpinned: 0.1, e_logit: 0.1, u_pinned: 0.1, w_logit: 0.1, emb: 0.5 };
    let mut r = resid(eval(k));
    for i in 0..grid.len().pow(N_KNOBS as u32) {
        let mut x = [0.0; N_KNOBS];
        let mut rest = i;
        for v in &mut x {
            *v = grid[rest % grid.len()];
            rest /= grid.len();
        }
        // Token share lives on a wider range.
        x[4] *= 3.0;
        let kn = Knobs::from_vec(x);
        let rn = resid(eval(kn));
        if sq(rn) < sq(r) {
            k = kn;
            r = rn;
        }
    }
    let mut lambda = 1e-3;
    for _ in 0..300 {
        if norm(r) < 2e-5 {
            break;
        }
        let x = k.to_vec();
        let h = 1e-6;
        let mut jac = [[0.0; N_KNOBS]; 4];
        for j in 0..N_KNOBS {
            let mut xp = x;
            xp[j] = if xp[j] + h > 0.95 { xp[j] - h } else { xp[j] + h };
            let d = xp[j] - x[j];
            let rp = resid(eval(Knobs::from_vec(xp)));
            for i in 0..4 {
                jac[i][j] = (rp[i] - r[i]) / d;
            }
        }
        let mut jtj = [[0.0; N_KNOBS]; N_KNOBS];
        let mut jtr = [0.0; N_KNOBS];
        for i in 0..N_KNOBS {
            for j in 0..N_KNOBS {
                jtj[i][j] = (0..4).map(|m| jac[m][i] * jac[m][j]).sum();
            }
            jtr[i] = (0..4).map(|m| jac[m][i] * r[m]).sum();
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj;
            for i in 0..N_KNOBS {
                a[i][i] += lambda * (1e-3 + jtj[i][i]);
            }
            let Some(step) = solve(a, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut xn = x;
            for j in 0..N_KNOBS {
                xn[j] -= step[j];
            }
            let kn = Knobs::from_vec(xn);
            let rn = resid(eval(kn));
            if sq(rn) < sq(r) {
                k = kn;
                r = rn;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    let g = build_with(spec, &s, k);
    let row = score_row(&g, &pinned);
    // Targets carry two decimals; anything that rounds to them is a match.
    if norm(resid(row)) > 4e-3 {
        anyhow::bail!("calibration did not converge: got {row:?}, wanted {target:?} ({k:?})");
    }
    Ok((g, k, row))
}

/// Tail features: low-influence nodes spread over layers and positions.
pub fn tail_features(
    rng: &mut ChaCha8Rng,
    count: usize,
    n_tokens: u32,
    total_influence: f64,
    taken: &BTreeSet<(u32, u64)>,
) -> Vec<FeatureSpec> {
    let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(0.2..1.0f64).powi(3)).collect();
    let sum: f64 = raw.iter().sum();
    let mut out = Vec::with_capacity(count);
    let mut used = taken.clone();
    for r in raw {
        let layer = rng.gen_range(0..N_LAYERS);
        let index = loop {
            let i = rng.gen_range(1000..131_072u64);
            if used.insert((layer, i)) {
                break i;
            }
        };
        out.push(FeatureSpec {
            layer,
            index,
            pos: rng.gen_range(0..n_tokens),
            influence: round6(total_influence * r / sum),
            pinned: false,
            label: None,
        });
    }
    out
}
