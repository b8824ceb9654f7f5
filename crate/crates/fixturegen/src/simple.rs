// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuits shipped as a graph plus a recorded grouping, no activations.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probegraph_core::io::GroupingRow;

use crate::graphgen::{tail_features, FeatureSpec, GraphSpec};

pub struct Recorded {
    pub name: &'static str,
    pub spec: GraphSpec,
    pub rows: Vec<GroupingRow>,
}

struct GroupPlan {
    category: &'static str,
    name: &'static str,
    layers: &'static [u32],
    pos: u32,
}

fn build(name: &'static str, seed: u64, words: &[&str], target: &str, plan: &[GroupPlan]) -> Recorded {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let mut specs = Vec::new();
    let mut rows = Vec::new();
    let n_pinned: usize = plan.iter().map(|g| g.layers.len()).sum();
    let raw: Vec<f64> = (0..n_pinned + 2).map(|_| rng.gen_range(0.4..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let share = |i: usize| (0.805 * raw[i] / total * 1e6).round() / 1e6;
    let mut k = 0;
    for g in plan {
        for &layer in g.layers {
            let index = loop {
                let i = rng.gen_range(1000..131_072u64);
                if taken.insert((layer, i)) {
                    break i;
                }
            };
            let s = FeatureSpec { layer, index, pos: g.pos, influence: share(k), pinned: true, label: None };
            rows.push(GroupingRow {
                feature_id: s.id(),
                layer,
                category: g.category.to_owned(),
                supernode_name: g.name.to_owned(),
                alignment_score: None,
                stability: None,
                reason: "recorded grouping".to_owned(),
            });
            specs.push(s);
            k += 1;
        }
    }
    for layer in [10, 16] {
        let index = loop {
            let i = rng.gen_range(1000..131_072u64);
            if taken.insert((layer, i)) {
                break i;
            }
        };
        specs.push(FeatureSpec { layer, index, pos: 1, influence: share(k), pinned: false, label: None });
        k += 1;
    }
    let n_tokens = words.len() as u32;
    specs.extend(tail_features(&mut rng, 600, n_tokens, 0.195, &taken));
    Recorded {
        name,
        spec: GraphSpec {
            prompt_tokens: words.iter().map(|s| s.to_string()).collect(),
            target: target.to_owned(),
            features: specs,
            seed: seed ^ 0x51,
        },
        rows,
    }
}

pub fn small(seed: u64) -> Recorded {
    build(
        "small",
        seed,
        &["The", " opposite", " of", " small", " is"],
        " large",
        &[
            GroupPlan { category: "Semantic (Dictionary)", name: "small", layers: &[0, 1, 2, 4, 6], pos: 3 },
            GroupPlan { category: "Semantic (Dictionary)", name: "opposite", layers: &[0, 2, 3, 5], pos: 1 },
            GroupPlan { category: "Relationship", name: "(opposite) related", layers: &[3, 7, 9, 11, 12], pos: 2 },
            GroupPlan { category: "Semantic (Concept)", name: "size", layers: &[1, 3, 8], pos: 3 },
            GroupPlan { category: "Say X", name: "Say large", layers: &[15, 17, 18, 20, 22, 24], pos: 4 },
        ],
    )
}

pub fn muscle(seed: u64) -> Recorded {
    build(
        "muscle",
        seed,
        &["The", " muscle", " called", " the"],
        " diaphragm",
        &[
            GroupPlan { category: "Semantic (Dictionary)", name: "muscle", layers: &[0, 1, 3, 5, 8], pos: 1 },
            GroupPlan { category: "Semantic (Concept)", name: "breathing", layers: &[2, 6, 10], pos: 1 },
            GroupPlan { category: "Relationship", name: "(called) related", layers: &[4, 7, 9, 12], pos: 2 },
            GroupPlan { category: "Say X", name: "Say diaphragm", layers: &[14, 16, 19, 21, 23], pos: 3 },
        ],
    )
}
