// SPDX-License-Identifier: MIT OR Apache-2.0

//! "Michael Jordan plays" -> " basketball".
//!
//! Six groups of four. Each group is loud on a few probes of its own and
//! quiet elsewhere; per-probe peaks are chosen explicitly. Seed-prompt
//! vectors are identical within each planned cosine-baseline cluster and
//! (layer, influence) is identical within each planned layer-adjacency
//! cluster, so both baselines partition the features exactly as planned.
//! Peaks, the quiet amplitude and the in-group amplitude spread are then
//! tuned by a seeded local search scored with the real evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probegraph_acquisition::probes::{ProbePrompt, SEED_PROBE_ID};
use probegraph_cli::analysis::{self, CONCEPT_ALIGNED};
use probegraph_cli::config::EvaluateConfig;
use probegraph_core::baselines::BaselineMethod;
use probegraph_core::classifier::{Category, ClassifierConfig};
use probegraph_core::graph::{AttributionGraph, GraphHeader, Node, NodeId, NodeKind};
use probegraph_core::io::RawActivation;
use probegraph_core::lexicon::{normalize_token, FunctionalVocabulary, DEFAULT_WINDOW};

use crate::design::{render, round4, Pattern, Shape};
use crate::graphgen::{tail_features, FeatureSpec, GraphSpec, MODEL, N_LAYERS};
use crate::probes::{last, probe_set};
use crate::{Circuit, Values};

/// Targets: (concept, cosine, layer adjacency) for consistency then similarity.
pub const TARGET_CONSISTENCY: [f64; 3] = [0.425, 0.183, 0.301];
pub const TARGET_SIMILARITY: [f64; 3] = [0.762, 0.130, 0.415];

const N_GROUPS: usize = 6;
const PER_GROUP: usize = 4;
const TOP_SHARE: f64 = 0.805;

#[derive(Debug, Clone, Copy)]
struct Group {
    category: Category,
    token: &'static str,
    active: [usize; 3],
}

const GROUPS: [Group; N_GROUPS] = [
    Group { category: Category::SemanticConcept, token: "michael", active: [0, 1, 2] },
    Group { category: Category::SemanticConcept, token: "plays", active: [3, 4, 5] },
    Group { category: Category::SemanticConcept, token: "jordan", active: [6, 7, 8] },
    Group { category: Category::SemanticConcept, token: "basketball", active: [9, 10, 11] },
    Group { category: Category::Relationship, token: "jordan", active: [12, 13, 14] },
    Group { category: Category::Relationship, token: "basketball", active: [2, 8, 14] },
];

const R_LAYERS: [u32; N_GROUPS] = [1, 4, 6, 9, 5, 10];
const R_INFLUENCE: [f64; N_GROUPS] = [0.050, 0.045, 0.040, 0.036, 0.032, 0.028];
/// Seed-prompt directions over ("Michael", " Jordan", " plays").
const Q_DIRECTIONS: [[f64; 3]; N_GROUPS] =
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];

fn expected_name(g: &Group) -> String {
    match g.category {
        Category::Relationship => format!("({}) related", g.token),
        _ => match g.token {
            "michael" => "Michael".into(),
            "jordan" => "Jordan".into(),
            t => t.into(),
        },
    }
}

/// Planned layer-adjacency cluster of member `m` of group `g`.
fn r_cluster(g: usize, m: usize) -> usize {
    match g {
        0..=3 if m < 3 => g,
        0..=3 => (g + 3) % 4,
        _ => 4 + m / 2,
    }
}

/// Planned cosine cluster: cluster q holds one member of groups q..q+3.
fn q_cluster(g: usize, m: usize) -> usize {
    (g + N_GROUPS - 3 + m) % N_GROUPS
}

#[derive(Debug, Clone)]
struct Member {
    group: usize,
    m: usize,
    spec: FeatureSpec,
    scale: f64,
    /// Per-probe multiplier on the quiet amplitude.
    quiet: Vec<f64>,
}

#[derive(Debug, Clone)]
struct State {
    eps: f64,
    gamma: [f64; N_GROUPS],
    /// Per member, per probe: normalized peak token.
    peaks: Vec<Vec<String>>,
}

pub struct Mj {
    pub circuit: Circuit,
    pub groups: BTreeMap<NodeId, String>,
    /// Final `(consistency, similarity)` per method as scored during design.
    pub scores: [[f64; 2]; 3],
}

struct Ctx {
    probes: Vec<ProbePrompt>,
    members: Vec<Member>,
    skeleton: AttributionGraph,
    vocab: FunctionalVocabulary,
    cfg: ClassifierConfig,
    /// Tokens a quiet probe may peak on, per probe.
    options: Vec<Vec<String>>,
}

fn shape(g: &Group) -> Shape {
    match g.category {
        Category::Relationship => Shape::Flat { base: 0.75 },
        _ => Shape::Spike,
    }
}

fn is_active(g: &Group, i: usize) -> bool {
    g.active.contains(&i)
}

impl Ctx {
    fn member_values(&self, k: usize, st: &State) -> Values {
        let mem = &self.members[k];
        let g = &GROUPS[mem.group];
        let mut rng = ChaCha8Rng::seed_from_u64(0x6a ^ (k as u64) << 8);
        let mut out = Values::new();
        let seed_vals: Vec<f64> =
            Q_DIRECTIONS[q_cluster(mem.group, mem.m)].iter().map(|d| round4(d * mem.scale)).collect();
        out.insert(SEED_PROBE_ID.to_owned(), seed_vals);
        for (i, p) in self.probes.iter().skip(1).enumerate() {
            let amp = if is_active(g, i) {
                let rot = g.active[mem.m % 3];
                if rot == i {
                    1.0
                } else {
                    st.gamma[mem.group]
                }
            } else {
                st.eps * mem.quiet[i]
            };
            let peak = last(&p.tokens, &st.peaks[k][i]);
            let mut pat = Pattern::new(peak, amp, shape(g));
            if g.category == Category::Relationship {
                for pos in crate::probes::positions(&p.tokens, g.token) {
                    pat = pat.with(pos, 0.95);
                }
            }
            out.insert(p.id.clone(), render(p.tokens.len(), &pat, mem.scale, &mut rng));
        }
        out
    }

    fn raw(&self, st: &State) -> Vec<RawActivation> {
        let mut raw = Vec::new();
        for k in 0..self.members.len() {
            let v = self.member_values(k, st);
            for p in &self.probes {
                raw.push(RawActivation {
                    feature: self.members[k].spec.id(),
                    layer: self.members[k].spec.layer,
                    probe_id: p.id.clone(),
                    tokens: p.tokens.clone(),
                    values: v[&p.id].clone(),
                });
            }
        }
        raw
    }

    /// `(scores, mismatched features)`.
    fn score(&self, st: &State) -> ([[f64; 2]; 3], usize) {
        let raw = self.raw(st);
        let records = analysis::build_records(&raw).expect("records");
        let sigs =
            analysis::build_signatures(&self.skeleton, &records, &self.vocab, DEFAULT_WINDOW).expect("signatures");
        let classified = analysis::classify_all(&sigs, N_LAYERS, &self.cfg);
        let supernodes = analysis::supernodes(&classified, &records, &self.vocab);
        let mut got: BTreeMap<NodeId, String> = BTreeMap::new();
        for s in &supernodes {
            for m in &s.members {
                got.insert(m.clone(), s.name.clone());
            }
        }
        let mut bad = 0;
        for mem in &self.members {
            let want = expected_name(&GROUPS[mem.group]);
            if got.get(&mem.spec.id()) != Some(&want) {
                bad += 1;
            }
        }
        if bad > 0 || supernodes.len() != N_GROUPS {
            return ([[0.0; 2]; 3], bad.max(1));
        }
        let profiles = analysis::profiles(&self.skeleton, &sigs, &records);
        let seeds = analysis::seed_vectors(&raw);
        let run = analysis::evaluate(&supernodes, &profiles, &seeds, Vec::new(), &EvaluateConfig::default())
            .expect("evaluate");
        let mut out = [[0.0; 2]; 3];
        for (method, e) in &run.results {
            let slot = if method == CONCEPT_ALIGNED {
                0
            } else if method == BaselineMethod::CosineAgglomerative.tag() {
                1
            } else {
                2
            };
            out[slot] = [e.peak_token_consistency, e.activation_pattern_similarity];
        }
        // The baselines must reproduce the planned partitions.
        for (method, c) in &run.baselines {
            let plan = |mem: &Member| match method {
                BaselineMethod::CosineAgglomerative => q_cluster(mem.group, mem.m),
                BaselineMethod::LayerAdjacencyWard => r_cluster(mem.group, mem.m),
            };
            let mut planned: BTreeMap<usize, BTreeSet<NodeId>> = BTreeMap::new();
            for mem in &self.members {
                planned.entry(plan(mem)).or_default().insert(mem.spec.id());
            }
            let mut a: Vec<BTreeSet<NodeId>> = planned.into_values().collect();
            let mut b: Vec<BTreeSet<NodeId>> = c.groups.iter().map(|g| g.iter().cloned().collect()).collect();
            a.sort();
            b.sort();
            if a != b {
                return (out, 1);
            }
        }
        (out, 0)
    }
}

fn error(scores: &[[f64; 2]; 3], bad: usize) -> f64 {
    let mut e = bad as f64;
    for i in 0..3 {
        e += (scores[i][0] - TARGET_CONSISTENCY[i]).powi(2);
        e += (scores[i][1] - TARGET_SIMILARITY[i]).powi(2);
    }
    e
}

fn max_dev(scores: &[[f64; 2]; 3]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..3 {
        d = d.max((scores[i][0] - TARGET_CONSISTENCY[i]).abs());
        d = d.max((scores[i][1] - TARGET_SIMILARITY[i]).abs());
    }
    d
}

fn tokens() -> Vec<String> {
    ["Michael", " Jordan", " plays"].iter().map(|s| s.to_string()).collect()
}

fn initial_peaks(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for mem in &ctx.members {
        let g = &GROUPS[mem.group];
        let quiet: Vec<usize> = (0..15).filter(|i| !is_active(g, *i)).collect();
        let mut order = quiet.clone();
        order.shuffle(rng);
        let mut peaks: Vec<String> = (0..15).map(|_| g.token.to_owned()).collect();
        let n_tok = 7usize.saturating_sub(3);
        for (j, &i) in order.iter().enumerate() {
            let opts = &ctx.options[i];
            peaks[i] = if i == 0 || j < n_tok {
                g.token.to_owned()
            } else if j < n_tok + 3 {
                ":".to_owned()
            } else {
                let sem: Vec<&String> = opts
                    .iter()
                    .filter(|t| ctx.vocab.role(t) == probegraph_core::lexicon::TokenRole::Semantic && *t != g.token)
                    .collect();
                (*sem.choose(rng).expect("semantic option")).clone()
            };
        }
        out.push(peaks);
    }
    out
}

pub fn build(seed: u64, iterations: usize) -> Mj {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = probe_set(&tokens(), " basketball");
    assert_eq!(probes.len(), 16);
    let options: Vec<Vec<String>> = probes
        .iter()
        .skip(1)
        .map(|p| {
            let set: BTreeSet<String> = p.tokens.iter().map(|t| normalize_token(t)).collect();
            set.into_iter().collect()
        })
        .collect();

    let mut taken = BTreeSet::new();
    let mut members = Vec::new();
    let raw_sum: f64 = R_INFLUENCE.iter().sum::<f64>() * PER_GROUP as f64 + 0.020 + 0.018;
    let norm = TOP_SHARE / raw_sum;
    for (gi, g) in GROUPS.iter().enumerate() {
        for m in 0..PER_GROUP {
            let r = r_cluster(gi, m);
            let layer = R_LAYERS[r];
            let index = loop {
                let i = rng.gen_range(1000..131_072u64);
                if taken.insert((layer, i)) {
                    break i;
                }
            };
            let pos = match g.token {
                "michael" => 0,
                "jordan" => 1,
                _ => 2,
            };
            members.push(Member {
                group: gi,
                m,
                spec: FeatureSpec {
                    layer,
                    index,
                    pos,
                    influence: (R_INFLUENCE[r] * norm * 1e6).round() / 1e6,
                    pinned: true,
                    label: None,
                },
                scale: (rng.gen_range(3.0..30.0f64) * 100.0).round() / 100.0,
                quiet: (0..15).map(|_| rng.gen_range(0.6..1.4)).collect(),
            });
        }
    }

    let header = GraphHeader {
        model: MODEL.into(),
        n_layers: N_LAYERS,
        prompt_tokens: tokens(),
        target_logit: " basketball".into(),
        extra: BTreeMap::new(),
    };
    let mut nodes: Vec<Node> = members
        .iter()
        .map(|m| Node {
            id: m.spec.id(),
            kind: NodeKind::Feature,
            layer: Some(m.spec.layer),
            feature_index: Some(m.spec.index),
            ctx_position: Some(m.spec.pos),
            influence: Some(m.spec.influence),
            label: None,
            extra: BTreeMap::new(),
        })
        .collect();
    for (id, kind) in [("E_0", NodeKind::Embedding), ("logit", NodeKind::Logit)] {
        nodes.push(Node {
            id: NodeId::new(id),
            kind,
            layer: None,
            feature_index: None,
            ctx_position: None,
            influence: None,
            label: None,
            extra: BTreeMap::new(),
        });
    }
    let skeleton = AttributionGraph::new(header, nodes, Vec::new()).expect("skeleton graph");
    let ctx = Ctx {
        probes,
        members,
        skeleton,
        vocab: FunctionalVocabulary::english(),
        cfg: ClassifierConfig::default(),
        options,
    };

    let mut st = State { eps: 0.15, gamma: [0.5; N_GROUPS], peaks: Vec::new() };
    st.peaks = initial_peaks(&ctx, &mut rng);
    let (mut scores, mut bad) = ctx.score(&st);
    let mut err = error(&scores, bad);
    let t0 = 2e-4;
    for it in 0..iterations {
        if bad == 0 && max_dev(&scores) < 0.004 {
            break;
        }
        let mut cand = st.clone();
        if rng.gen_bool(0.7) {
            let k = rng.gen_range(0..ctx.members.len());
            let g = &GROUPS[ctx.members[k].group];
            let i = rng.gen_range(1..15);
            if is_active(g, i) {
                continue;
            }
            cand.peaks[k][i] = ctx.options[i].choose(&mut rng).expect("options").clone();
        } else {
            let j = rng.gen_range(0..=N_GROUPS);
            let step = rng.gen_range(-0.05..0.05);
            if j == N_GROUPS {
                cand.eps = (cand.eps + step).clamp(0.02, 0.9);
            } else {
                cand.gamma[j] = (cand.gamma[j] + step).clamp(0.02, 0.98);
            }
        }
        let (s, b) = ctx.score(&cand);
        let e = error(&s, b);
        let temp = t0 * (1.0 - it as f64 / iterations as f64);
        if e <= err || (temp > 0.0 && rng.gen_bool((-(e - err) / temp).exp().min(1.0))) {
            st = cand;
            scores = s;
            bad = b;
            err = e;
        }
    }
    assert_eq!(bad, 0, "search left misclassified features");

    // Fixtures: members, two scattered ungrouped features, then the tail.
    let mut fixtures: BTreeMap<NodeId, Values> = BTreeMap::new();
    for k in 0..ctx.members.len() {
        fixtures.insert(ctx.members[k].spec.id(), ctx.member_values(k, &st));
    }
    let mut specs: Vec<FeatureSpec> = ctx.members.iter().map(|m| m.spec.clone()).collect();
    for (u, (layer, infl)) in [(11u32, 0.020), (15, 0.018)].into_iter().enumerate() {
        let index = loop {
            let i = rng.gen_range(1000..131_072u64);
            if taken.insert((layer, i)) {
                break i;
            }
        };
        let s = FeatureSpec {
            layer,
            index,
            pos: 1,
            influence: (infl * norm * 1e6).round() / 1e6,
            pinned: false,
            label: None,
        };
        fixtures.insert(s.id(), scatter_values(&ctx.probes, u, &mut rng));
        specs.push(s);
    }
    let tail = tail_features(&mut rng, 600, 3, 1.0 - TOP_SHARE, &taken);
    let mut ranked: Vec<&FeatureSpec> = tail.iter().collect();
    ranked.sort_by(|a, b| b.influence.total_cmp(&a.influence).then(a.layer.cmp(&b.layer)));
    for (u, s) in ranked.into_iter().take(100 - fixtures.len()).enumerate() {
        fixtures.insert(s.id(), scatter_values(&ctx.probes, u, &mut rng));
    }
    specs.extend(tail);

    let groups = ctx.members.iter().map(|m| (m.spec.id(), expected_name(&GROUPS[m.group]))).collect();
    Mj {
        circuit: Circuit {
            name: "mj",
            spec: GraphSpec {
                prompt_tokens: tokens(),
                target: " basketball".into(),
                features: specs,
                seed: seed ^ 0x3,
            },
            probes: ctx.probes,
            fixtures,
        },
        groups,
        scores,
    }
}

/// Sharp peaks rotating over the four content words.
fn scatter_values(probes: &[ProbePrompt], offset: usize, rng: &mut ChaCha8Rng) -> Values {
    let words = ["michael", "jordan", "plays", "basketball"];
    let scale = (rng.gen_range(1.0..10.0f64) * 100.0).round() / 100.0;
    probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w = if i == 0 { words[offset % 3] } else { words[(i + offset) % 4] };
            let pat = Pattern::new(last(&p.tokens, w), rng.gen_range(0.7..1.0), Shape::Spike);
            (p.id.clone(), render(p.tokens.len(), &pat, scale, rng))
        })
        .collect()
}
