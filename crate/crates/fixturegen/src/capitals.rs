// SPDX-License-Identifier: MIT OR Apache-2.0

//! The state-capital pair: "The capital of Texas is" and its California swap.
//!
//! Dallas has 39 grouped features. 25 early ones behave identically on the
//! swapped probes; 14 late ones (and three Texas detectors) do not.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probegraph_acquisition::probes::ProbePrompt;
use probegraph_core::graph::NodeId;

use crate::design::{render, Pattern, Shape};
use crate::graphgen::{tail_features, FeatureSpec, GraphSpec};
use crate::probes::{last, probe_set};
use crate::{Circuit, Values};

pub const SWAPS: [(&str, &str); 3] = [("Texas", "California"), ("Austin", "Sacramento"), ("Dallas", "Oakland")];
pub const SAY_CAPITAL_INDEX: u64 = 74108;
pub const SAY_CAPITAL_MAX: f64 = 63.31;

#[derive(Debug, Clone, Copy)]
struct Entities {
    state: &'static str,
    city: &'static str,
}

const TEXAS: Entities = Entities { state: "texas", city: "austin" };
const CALIFORNIA: Entities = Entities { state: "california", city: "sacramento" };

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Capital,
    State,
    City,
    Of,
    Colon,
}

impl Tok {
    fn norm(self, e: Entities) -> &'static str {
        match self {
            Tok::Capital => "capital",
            Tok::State => e.state,
            Tok::City => e.city,
            Tok::Of => "of",
            Tok::Colon => ":",
        }
    }
}

/// Relationship peak rotation over the 15 probes.
const REL_ROTATION: [Tok; 15] = [
    Tok::Of,
    Tok::State,
    Tok::Capital,
    Tok::Of,
    Tok::City,
    Tok::State,
    Tok::Of,
    Tok::Capital,
    Tok::State,
    Tok::Colon,
    Tok::Of,
    Tok::City,
    Tok::State,
    Tok::Capital,
    Tok::Of,
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Dict(Tok),
    /// Flat response; the emphasized token names the group.
    Rel {
        emph: Tok,
        offset: usize,
        near_tie: bool,
    },
    SayCity,
    SayCapital,
    /// Sharp peaks rotating over the content tokens.
    Scatter {
        offset: usize,
    },
}

#[derive(Debug, Clone)]
struct Feature {
    spec: FeatureSpec,
    kind: Kind,
    scale: f64,
    /// Dallas side: activation pattern survives the swap.
    transfers: bool,
}

fn pattern(kind: Kind, probe: usize, tokens: &[String], e: Entities, rng: &mut ChaCha8Rng) -> Pattern {
    let seed = probe == 0;
    let i = probe.saturating_sub(1);
    let amp = if seed { 1.0 } else { rng.gen_range(0.75..1.0) };
    match kind {
        Kind::Dict(t) => {
            let norm = t.norm(e);
            if tokens.iter().any(|x| probegraph_core::lexicon::normalize_token(x) == norm) {
                Pattern::new(last(tokens, norm), amp, Shape::Spike)
            } else {
                Pattern::new(tokens.len() - 1, 0.3 * amp, Shape::Spike)
            }
        }
        Kind::Rel { emph, offset, near_tie } => {
            let peak_tok = if seed { emph } else { REL_ROTATION[(i + offset) % 15] };
            let peak = last(tokens, peak_tok.norm(e));
            let mut p = Pattern::new(peak, amp, Shape::Flat { base: 0.65 });
            for pos in crate::probes::positions(tokens, emph.norm(e)) {
                p = p.with(pos, 0.95);
            }
            if near_tie && !seed {
                let runner = match peak_tok {
                    Tok::Capital => Some(last(tokens, e.city)),
                    Tok::City => Some(last(tokens, "capital")),
                    _ => None,
                };
                if let Some(r) = runner {
                    p = p.with(r, 0.999);
                }
            }
            p
        }
        Kind::SayCity => {
            let pos = if seed { tokens.len() - 1 } else { last(tokens, e.city) - 1 };
            Pattern::new(pos, amp, Shape::Spike).with(last(tokens, "capital") - 1, 0.35)
        }
        Kind::SayCapital => {
            // One probe peaks on the copula instead of the article.
            let pos = if i == 11 && !seed { last(tokens, e.city) - 1 } else { last(tokens, "capital") - 1 };
            let amp = if seed { 1.0 } else { rng.gen_range(0.6..0.95) };
            Pattern::new(pos, amp, Shape::Spike)
        }
        Kind::Scatter { offset } => {
            let t = [Tok::Capital, Tok::State, Tok::City][(i + offset) % 3];
            let norm = t.norm(e);
            let pos = if seed && norm == e.city { last(tokens, "capital") } else { last(tokens, norm) };
            Pattern::new(pos, amp, Shape::Spike)
        }
    }
}

fn values(f: &Feature, probes: &[ProbePrompt], e: Entities, rng: &mut ChaCha8Rng) -> Values {
    probes
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let pat = pattern(f.kind, pi, &p.tokens, e, rng);
            (p.id.clone(), render(p.tokens.len(), &pat, f.scale, rng))
        })
        .collect()
}

/// Swap the near-tie pairs back so the runner-up wins on the B side.
fn swap_near_ties(v: &mut Values) {
    for (id, vals) in v.iter_mut() {
        if id == probegraph_acquisition::probes::SEED_PROBE_ID {
            continue;
        }
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let (a, b) = (idx[0], idx[1]);
        if vals[b] >= 0.998 * vals[a] {
            vals.swap(a, b);
        }
    }
}

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

pub fn dallas_tokens() -> Vec<String> {
    toks(&["The", " capital", " of", " Texas", " is"])
}

pub fn oakland_tokens() -> Vec<String> {
    toks(&["The", " capital", " of", " California", " is"])
}

struct Builder {
    rng: ChaCha8Rng,
    taken: BTreeSet<(u32, u64)>,
}

impl Builder {
    fn index(&mut self, layer: u32) -> u64 {
        loop {
            let i = self.rng.gen_range(1000..131_072u64);
            if self.taken.insert((layer, i)) {
                return i;
            }
        }
    }

    fn feature(&mut self, layer: u32, index: Option<u64>, pos: u32, kind: Kind, transfers: bool) -> Feature {
        let index = match index {
            Some(i) => {
                self.taken.insert((layer, i));
                i
            }
            None => self.index(layer),
        };
        let scale = if kind == Kind::SayCapital {
            SAY_CAPITAL_MAX
        } else {
            (self.rng.gen_range(2.0..40.0f64) * 100.0).round() / 100.0
        };
        Feature {
            spec: FeatureSpec { layer, index, pos, influence: 0.0, pinned: true, label: None },
            kind,
            scale,
            transfers,
        }
    }
}

/// Give the pinned features (and the ungrouped heavy ones) most of the
/// influence so that tau 0.8 selects exactly them.
fn assign_influence(rng: &mut ChaCha8Rng, top: &mut [&mut FeatureSpec], top_share: f64) {
    let raw: Vec<f64> = top.iter().map(|_| rng.gen_range(0.4..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    for (f, r) in top.iter_mut().zip(raw) {
        f.influence = (top_share * r / sum * 1e6).round() / 1e6;
    }
}

pub struct Pair {
    pub dallas: Circuit,
    pub oakland: Circuit,
    /// Expected Dallas grouping: feature id to supernode name.
    pub dallas_groups: BTreeMap<NodeId, String>,
    pub oakland_groups: BTreeMap<NodeId, String>,
    pub transferred: BTreeSet<NodeId>,
}

const TOP_SHARE: f64 = 0.805;
const N_TAIL: usize = 600;
const N_FIXTURES: usize = 100;

pub fn build(seed: u64) -> Pair {
    let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), taken: BTreeSet::new() };
    let mut dallas: Vec<Feature> = Vec::new();

    // Transferred: early detectors and relations.
    for l in [0, 0, 1, 2, 11, 13] {
        dallas.push(b.feature(l, None, 1, Kind::Dict(Tok::Capital), true));
    }
    for l in [3, 4] {
        dallas.push(b.feature(l, None, 3, Kind::Dict(Tok::State), true));
    }
    for l in [4, 5, 6, 8, 16] {
        dallas.push(b.feature(l, None, 4, Kind::Dict(Tok::City), true));
    }
    let rel_layers = [1, 1, 1, 2, 3, 7, 8, 9, 10, 12, 13, 18];
    for (k, l) in rel_layers.into_iter().enumerate() {
        let emph = if k % 3 == 2 { Tok::Capital } else { Tok::State };
        let near_tie = matches!(k, 5 | 7 | 9);
        let index = (k == 0).then_some(12928);
        let pos = b.rng.gen_range(1..5);
        dallas.push(b.feature(l, index, pos, Kind::Rel { emph, offset: (k * 4) % 15, near_tie }, true));
    }
    // Failed: entity-bound detectors and output promoters.
    for l in [3, 7, 12] {
        dallas.push(b.feature(l, None, 3, Kind::Dict(Tok::State), false));
    }
    dallas.push(b.feature(20, Some(SAY_CAPITAL_INDEX), 4, Kind::SayCapital, false));
    for l in [14, 14, 16, 17, 19, 20, 22, 23, 24, 19] {
        dallas.push(b.feature(l, None, 4, Kind::SayCity, false));
    }
    let mut ungrouped = vec![
        b.feature(11, None, 3, Kind::Scatter { offset: 0 }, false),
        b.feature(18, None, 4, Kind::Scatter { offset: 1 }, false),
    ];
    for u in &mut ungrouped {
        u.spec.pinned = false;
    }

    // Oakland's own late features at the same layers, new indices.
    let mut oak_own: Vec<Feature> = Vec::new();
    for f in dallas.iter().filter(|f| !f.transfers) {
        let kind = f.kind;
        let mut g = b.feature(f.spec.layer, None, f.spec.pos, kind, false);
        if kind == Kind::SayCapital {
            g.scale = (b.rng.gen_range(30.0..60.0f64) * 100.0).round() / 100.0;
        }
        oak_own.push(g);
    }
    let mut oak_ungrouped = vec![
        b.feature(11, None, 3, Kind::Scatter { offset: 2 }, false),
        b.feature(17, None, 4, Kind::Scatter { offset: 0 }, false),
    ];
    for u in &mut oak_ungrouped {
        u.spec.pinned = false;
    }

    let d_probes = probe_set(&dallas_tokens(), " Austin");
    let o_probes = probe_set(&oakland_tokens(), " Sacramento");
    let map: BTreeMap<String, String> = SWAPS.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let em = probegraph_core::transfer::EntityMap { swaps: map };
    for (d, o) in d_probes.iter().zip(&o_probes) {
        assert_eq!(d.id, o.id);
        assert_eq!(probegraph_cli::pipeline::swap_entities(&d.text, &em), o.text, "swapped probes differ");
        assert_eq!(d.tokens.len(), o.tokens.len());
    }

    // Influence: pinned plus the two ungrouped carry TOP_SHARE.
    {
        let mut top: Vec<&mut FeatureSpec> =
            dallas.iter_mut().chain(ungrouped.iter_mut()).map(|f| &mut f.spec).collect();
        assign_influence(&mut b.rng, &mut top, TOP_SHARE);
    }
    // Oakland copies the transferred features' influence and redraws the rest.
    let oak_transferred: Vec<Feature> = dallas.iter().filter(|f| f.transfers).cloned().collect();
    let mut oak_pinned: Vec<Feature> = oak_transferred.iter().cloned().chain(oak_own).collect();
    {
        let mut top: Vec<&mut FeatureSpec> =
            oak_pinned.iter_mut().chain(oak_ungrouped.iter_mut()).map(|f| &mut f.spec).collect();
        assign_influence(&mut b.rng, &mut top, TOP_SHARE);
    }

    // Dallas side values.
    let mut d_values: BTreeMap<NodeId, Values> = BTreeMap::new();
    let mut o_values: BTreeMap<NodeId, Values> = BTreeMap::new();
    for f in dallas.iter().chain(&ungrouped) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ f.spec.index ^ (u64::from(f.spec.layer) << 40));
        let v = values(f, &d_probes, TEXAS, &mut rng);
        if f.transfers {
            let mut ov = v.clone();
            if matches!(f.kind, Kind::Rel { near_tie: true, .. }) {
                swap_near_ties(&mut ov);
            }
            o_values.insert(f.spec.id(), ov);
        }
        d_values.insert(f.spec.id(), v);
    }
    for f in oak_pinned.iter().filter(|f| !f.transfers).chain(&oak_ungrouped) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ f.spec.index ^ (u64::from(f.spec.layer) << 40));
        o_values.insert(f.spec.id(), values(f, &o_probes, CALIFORNIA, &mut rng));
    }
    // Dallas-only features exist in the Oakland graph with little influence
    // and only a stray response on the first token.
    let mut counterparts: Vec<FeatureSpec> = Vec::new();
    for f in dallas.iter().filter(|f| !f.transfers) {
        let mut s = f.spec.clone();
        s.pinned = false;
        s.influence = (b.rng.gen_range(2e-4..8e-4f64) * 1e6).round() / 1e6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ s.index);
        let v: Values = o_probes
            .iter()
            .map(|p| {
                let pat = Pattern::new(0, rng.gen_range(0.05..0.2), Shape::Bare);
                (p.id.clone(), render(p.tokens.len(), &pat, f.scale, &mut rng))
            })
            .collect();
        o_values.insert(s.id(), v);
        counterparts.push(s);
    }

    let n_tokens = 5;
    let dallas_tail = tail_features(&mut b.rng, N_TAIL, n_tokens, 1.0 - TOP_SHARE, &b.taken);
    let mut o_taken = b.taken.clone();
    o_taken.extend(dallas_tail.iter().map(|f| (f.layer, f.index)));
    let counter_share: f64 = counterparts.iter().map(|f| f.influence).sum();
    let oak_tail = tail_features(&mut b.rng, N_TAIL, n_tokens, 1.0 - TOP_SHARE - counter_share, &o_taken);

    let mut d_specs: Vec<FeatureSpec> = dallas.iter().chain(&ungrouped).map(|f| f.spec.clone()).collect();
    d_specs.extend(dallas_tail.iter().cloned());
    let mut o_specs: Vec<FeatureSpec> = oak_pinned.iter().chain(&oak_ungrouped).map(|f| f.spec.clone()).collect();
    o_specs.extend(counterparts.iter().cloned());
    o_specs.extend(oak_tail.iter().cloned());

    tail_fixtures(seed, &dallas_tail, &d_probes, TEXAS, &mut d_values);
    tail_fixtures(seed ^ 1, &oak_tail, &o_probes, CALIFORNIA, &mut o_values);

    let dallas_groups = expected_groups(&dallas, TEXAS, "Austin");
    let oakland_groups = expected_groups(&oak_pinned, CALIFORNIA, "Sacramento");

    Pair {
        dallas: Circuit {
            name: "dallas",
            spec: GraphSpec {
                prompt_tokens: dallas_tokens(),
                target: " Austin".into(),
                features: d_specs,
                seed: seed ^ 0xd,
            },
            probes: d_probes,
            fixtures: d_values,
        },
        oakland: Circuit {
            name: "oakland",
            spec: GraphSpec {
                prompt_tokens: oakland_tokens(),
                target: " Sacramento".into(),
                features: o_specs,
                seed: seed ^ 0x0a,
            },
            probes: o_probes,
            fixtures: o_values,
        },
        dallas_groups,
        oakland_groups,
        transferred: dallas.iter().filter(|f| f.transfers).map(|f| f.spec.id()).collect(),
    }
}

/// Fixtures for the highest-influence tail features, in the scattered style.
fn tail_fixtures(
    seed: u64,
    tail: &[FeatureSpec],
    probes: &[ProbePrompt],
    e: Entities,
    out: &mut BTreeMap<NodeId, Values>,
) {
    let mut ranked: Vec<&FeatureSpec> = tail.iter().collect();
    ranked.sort_by(|a, b| b.influence.total_cmp(&a.influence).then(a.layer.cmp(&b.layer)));
    let want = N_FIXTURES.saturating_sub(out.len());
    for s in ranked.into_iter().take(want) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ s.index ^ (u64::from(s.layer) << 40));
        let offsets = [0usize, 1, 2];
        let f = Feature {
            spec: s.clone(),
            kind: Kind::Scatter { offset: *offsets.choose(&mut rng).expect("non-empty") },
            scale: (rng.gen_range(1.0..10.0f64) * 100.0).round() / 100.0,
            transfers: false,
        };
        out.insert(s.id(), values(&f, probes, e, &mut rng));
    }
}

fn expected_groups(features: &[Feature], e: Entities, city_display: &str) -> BTreeMap<NodeId, String> {
    let title = |s: &str| {
        let mut c = s.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect::<String>()).unwrap_or_default()
    };
    features
        .iter()
        .filter(|f| f.spec.pinned)
        .map(|f| {
            let name = match f.kind {
                Kind::Dict(Tok::Capital) => "capital".to_owned(),
                Kind::Dict(Tok::State) => title(e.state),
                Kind::Dict(_) => city_display.to_owned(),
                Kind::Rel { emph, .. } => format!("({}) related", emph.norm(e)),
                Kind::SayCity => format!("Say {city_display}"),
                Kind::SayCapital => "Say capital".to_owned(),
                Kind::Scatter { .. } => String::new(),
            };
            (f.spec.id(), name)
        })
        .collect()
}
