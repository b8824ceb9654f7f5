// SPDX-License-Identifier: MIT OR Apache-2.0

//! Twenty hand-built signatures sitting on the decision boundaries.

use probegraph_core::classifier::Category;
use probegraph_core::graph::NodeId;
use probegraph_core::lexicon::{MappingRule, TokenRole};
use probegraph_core::signatures::{ProbePeak, Signature};

pub struct Case {
    pub name: &'static str,
    pub sig: Signature,
    pub n_layers: u32,
    pub expect: Category,
    /// Winner before the stability check.
    pub candidate: Option<Category>,
}

#[derive(Clone, Copy)]
pub enum Good {
    Dict,
    Concept,
    Rel,
    SayX,
}

fn probe(i: usize, good: Option<Good>) -> ProbePeak {
    let (tok, role, target, sparsity) = match good {
        Some(Good::Dict) | Some(Good::Concept) => ("texas", TokenRole::Semantic, Some("texas"), 0.9),
        Some(Good::Rel) => ("of", TokenRole::Functional, None, 0.3),
        Some(Good::SayX) => ("is", TokenRole::Functional, Some("austin"), 0.9),
        None => ("zz", TokenRole::Functional, None, 0.9),
    };
    ProbePeak {
        probe_id: format!("p{i:03}"),
        peak_token: tok.into(),
        peak_display: tok.into(),
        peak_role: role,
        target: target.map(Into::into),
        target_display: target.map(Into::into),
        rule: if target.is_some() { MappingRule::Forward } else { MappingRule::NoTarget },
        sparsity,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Knobs {
    pub layer: u32,
    pub pc: f64,
    pub nd: usize,
    pub fvs: f64,
    pub sc: f64,
    pub cf: f64,
    pub ms: f64,
}

/// `n` probes of which the first `good` satisfy the per-probe clause of `kind`.
pub fn signature(k: Knobs, kind: Good, n: usize, good: usize) -> Signature {
    let probes: Vec<ProbePeak> = (0..n).map(|i| probe(i, (i < good).then_some(kind))).collect();
    Signature {
        feature: NodeId::new(format!("{}_1_0", k.layer)),
        layer: k.layer,
        peak_consistency: k.pc,
        n_distinct_peaks: k.nd,
        func_vs_sem: k.fvs,
        semantic_conf: k.sc,
        conf_functional: k.cf,
        median_sparsity: k.ms,
        modal_peak_token: "texas".into(),
        modal_peak_display: "Texas".into(),
        modal_target_token: Some("austin".into()),
        modal_target_display: Some("Austin".into()),
        modal_semantic_token: Some("texas".into()),
        modal_semantic_display: Some("Texas".into()),
        n_probes: n,
        role_consistency: 1.0,
        mean_cosine_to_seed: 0.5,
        mean_density: 0.2,
        probes,
    }
}

const BASE: Knobs = Knobs { layer: 10, pc: 0.3, nd: 6, fvs: 0.2, sc: 0.3, cf: 0.2, ms: 0.8 };

fn case(name: &'static str, k: Knobs, kind: Good, expect: Category) -> Case {
    let candidate = (expect != Category::Ungrouped).then_some(expect);
    Case { name, sig: signature(k, kind, 10, 10), n_layers: 26, expect, candidate }
}

pub fn cases() -> Vec<Case> {
    use Category::*;
    let dict = Knobs { layer: 5, pc: 0.80, nd: 1, fvs: 0.0, sc: 0.3, cf: 0.0, ms: 0.9 };
    let concept = Knobs { layer: 3, pc: 0.5, nd: 3, fvs: 0.0, sc: 0.2, cf: 0.0, ms: 0.9 };
    let rel = Knobs { layer: 10, pc: 0.4, nd: 4, fvs: 0.6, sc: 0.2, cf: 0.3, ms: 0.449 };
    let sayx = Knobs { layer: 7, pc: 0.5, nd: 3, fvs: 0.50, sc: 0.2, cf: 0.90, ms: 0.9 };
    let mut out = vec![
        case("dictionary at peak_consistency 0.80", dict, Good::Dict, SemanticDictionary),
        case("dictionary below at 0.79", Knobs { pc: 0.79, nd: 2, ..dict }, Good::Dict, Ungrouped),
        case("dictionary with two distinct peaks", Knobs { pc: 0.9, nd: 2, ..dict }, Good::Dict, Ungrouped),
        case("concept at layer 3", concept, Good::Concept, SemanticConcept),
        case("concept fails at layer 4", Knobs { layer: 4, ..concept }, Good::Concept, Ungrouped),
        case("concept at semantic_conf 0.50", Knobs { layer: 10, sc: 0.50, ..concept }, Good::Concept, SemanticConcept),
        case("concept fails at semantic_conf 0.49", Knobs { layer: 10, sc: 0.49, ..concept }, Good::Concept, Ungrouped),
        case("relationship at median_sparsity 0.449", rel, Good::Rel, Relationship),
        case("relationship fails at 0.45", Knobs { ms: 0.45, ..rel }, Good::Rel, Ungrouped),
        case("say-x at every threshold", sayx, Good::SayX, SayX),
        case("say-x fails at layer 6", Knobs { layer: 6, ..sayx }, Good::SayX, Ungrouped),
        case("say-x fails at func_vs_sem 0.49", Knobs { fvs: 0.49, ..sayx }, Good::SayX, Ungrouped),
        case("say-x fails at conf_functional 0.89", Knobs { cf: 0.89, ..sayx }, Good::SayX, Ungrouped),
    ];
    out.push(Case {
        name: "stability at 60%",
        sig: signature(dict, Good::Dict, 100, 60),
        n_layers: 26,
        expect: SemanticDictionary,
        candidate: Some(SemanticDictionary),
    });
    out.push(Case {
        name: "stability at 59%",
        sig: signature(dict, Good::Dict, 100, 59),
        n_layers: 26,
        expect: Ungrouped,
        candidate: Some(SemanticDictionary),
    });
    // Dictionary, concept and relationship all pass; dictionary has the
    // highest confidence and ties concept, which it outranks.
    out.push(case(
        "dictionary wins on alignment",
        Knobs { layer: 2, pc: 0.85, nd: 1, fvs: 0.0, sc: 0.9, cf: 0.0, ms: 0.4 },
        Good::Dict,
        SemanticDictionary,
    ));
    out.push(case(
        "diffuse early feature is a relationship",
        Knobs { layer: 2, pc: 0.4, nd: 5, fvs: 0.6, sc: 0.3, cf: 0.0, ms: 0.2 },
        Good::Rel,
        Relationship,
    ));
    out.push(case(
        "semantic early feature stays a concept",
        Knobs { layer: 2, pc: 0.4, nd: 5, fvs: 0.1, sc: 0.9, cf: 0.0, ms: 0.2 },
        Good::Concept,
        SemanticConcept,
    ));
    // 25 layers: layer 12 sits at prior 0.5 for both directions, so say-x
    // and dictionary tie on alignment and confidence.
    out.push(Case {
        name: "say-x wins an exact tie by priority",
        sig: signature(Knobs { layer: 12, pc: 0.9, nd: 1, fvs: 0.8, sc: 1.0, cf: 1.0, ms: 0.9 }, Good::SayX, 10, 10),
        n_layers: 25,
        expect: SayX,
        candidate: Some(SayX),
    });
    out.push(case("nothing passes", BASE, Good::Dict, Ungrouped));
    out
}
