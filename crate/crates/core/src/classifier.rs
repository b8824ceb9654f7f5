// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rule-based supernode classification and naming.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::IoError;
use crate::graph::NodeId;
use crate::lexicon::{label_tokens, normalize_token, FunctionalVocabulary, TokenRole};
use crate::signatures::{ActivationRecord, ProbePeak, Signature};

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SayX,
    SemanticDictionary,
    SemanticConcept,
    Relationship,
    Ungrouped,
}

impl Category {
    /// Tie-break order, most preferred first.
    pub const PRIORITY: [Category; 4] =
        [Category::SayX, Category::SemanticDictionary, Category::SemanticConcept, Category::Relationship];

    pub fn label(self) -> &'static str {
        match self {
            Category::SayX => "Say X",
            Category::SemanticDictionary => "Semantic (Dictionary)",
            Category::SemanticConcept => "Semantic (Concept)",
            Category::Relationship => "Relationship",
            Category::Ungrouped => "Ungrouped",
        }
    }

    pub fn is_semantic(self) -> bool {
        matches!(self, Category::SemanticDictionary | Category::SemanticConcept)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Decision thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub dict_min_peak_consistency: f64,
    pub dict_max_distinct_peaks: usize,
    pub concept_max_layer: u32,
    pub concept_min_semantic_conf: f64,
    /// Optional consistency floor for concepts; off by default.
    pub concept_min_peak_consistency: Option<f64>,
    pub relationship_max_median_sparsity: f64,
    pub sayx_min_func_vs_sem: f64,
    pub sayx_min_conf_functional: f64,
    pub sayx_min_layer: u32,
    pub stability_min_fraction: f64,
    pub weight_peak_consistency: f64,
    pub weight_category_confidence: f64,
    pub weight_layer_prior: f64,
    pub weight_concentration: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            dict_min_peak_consistency: 0.80,
            dict_max_distinct_peaks: 1,
            concept_max_layer: 3,
            concept_min_semantic_conf: 0.50,
            concept_min_peak_consistency: None,
            relationship_max_median_sparsity: 0.45,
            sayx_min_func_vs_sem: 0.50,
            sayx_min_conf_functional: 0.90,
            sayx_min_layer: 7,
            stability_min_fraction: 0.60,
            weight_peak_consistency: 0.4,
            weight_category_confidence: 0.3,
            weight_layer_prior: 0.2,
            weight_concentration: 0.1,
        }
    }
}

impl ClassifierConfig {
    pub fn from_yaml_str(text: &str) -> Result<Self, IoError> {
        Ok(serde_yaml::from_str(text)?)
    }
}

fn ge(a: f64, b: f64) -> bool {
    a >= b - EPS
}

fn lt(a: f64, b: f64) -> bool {
    a < b - EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTrace {
    pub category: Category,
    pub clauses: Vec<Clause>,
    pub passed: bool,
    pub confidence: f64,
    pub alignment_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTrace {
    pub categories: Vec<CategoryTrace>,
    /// Winner before the stability check.
    pub candidate: Option<Category>,
    /// Share of probes satisfying the candidate's per-probe clauses.
    pub stability: Option<f64>,
    pub chosen: Category,
    pub alignment_score: f64,
    pub reason: String,
}

fn clause(name: impl Into<String>, passed: bool) -> Clause {
    Clause { name: name.into(), passed }
}

fn category_clauses(sig: &Signature, cfg: &ClassifierConfig) -> Vec<(Category, Vec<Clause>)> {
    let mut concept = vec![clause(
        format!("layer <= {} or semantic_conf >= {}", cfg.concept_max_layer, cfg.concept_min_semantic_conf),
        sig.layer <= cfg.concept_max_layer || ge(sig.semantic_conf, cfg.concept_min_semantic_conf),
    )];
    if let Some(floor) = cfg.concept_min_peak_consistency {
        concept.push(clause(format!("peak_consistency >= {floor}"), ge(sig.peak_consistency, floor)));
    }
    vec![
        (
            Category::SayX,
            vec![
                clause(
                    format!("func_vs_sem >= {}", cfg.sayx_min_func_vs_sem),
                    ge(sig.func_vs_sem, cfg.sayx_min_func_vs_sem),
                ),
                clause(
                    format!("conf_functional >= {}", cfg.sayx_min_conf_functional),
                    ge(sig.conf_functional, cfg.sayx_min_conf_functional),
                ),
                clause(format!("layer >= {}", cfg.sayx_min_layer), sig.layer >= cfg.sayx_min_layer),
            ],
        ),
        (
            Category::SemanticDictionary,
            vec![
                clause(
                    format!("peak_consistency >= {}", cfg.dict_min_peak_consistency),
                    ge(sig.peak_consistency, cfg.dict_min_peak_consistency),
                ),
                clause(
                    format!("n_distinct_peaks <= {}", cfg.dict_max_distinct_peaks),
                    sig.n_distinct_peaks <= cfg.dict_max_distinct_peaks,
                ),
            ],
        ),
        (Category::SemanticConcept, concept),
        (
            Category::Relationship,
            vec![clause(
                format!("median_sparsity < {}", cfg.relationship_max_median_sparsity),
                lt(sig.median_sparsity, cfg.relationship_max_median_sparsity),
            )],
        ),
    ]
}

fn category_confidence(sig: &Signature, cat: Category) -> f64 {
    match cat {
        Category::SemanticDictionary | Category::SemanticConcept => sig.semantic_conf,
        Category::SayX => sig.conf_functional,
        Category::Relationship => 1.0 - sig.median_sparsity,
        Category::Ungrouped => 0.0,
    }
}

/// Linear ramp over the layer range: late layers for Say X, early otherwise.
pub fn layer_prior(layer: u32, n_layers: u32, cat: Category) -> f64 {
    let ramp = if n_layers > 1 { (f64::from(layer) / f64::from(n_layers - 1)).clamp(0.0, 1.0) } else { 0.0 };
    if cat == Category::SayX {
        ramp
    } else {
        1.0 - ramp
    }
}

pub fn alignment_score(sig: &Signature, cat: Category, n_layers: u32, cfg: &ClassifierConfig) -> f64 {
    cfg.weight_peak_consistency * sig.peak_consistency
        + cfg.weight_category_confidence * category_confidence(sig, cat)
        + cfg.weight_layer_prior * layer_prior(sig.layer, n_layers, cat)
        + cfg.weight_concentration * (1.0 - sig.median_sparsity)
}

/// Whether one probe satisfies a category's peak-based clauses.
pub fn probe_satisfies(cat: Category, probe: &ProbePeak, sig: &Signature, cfg: &ClassifierConfig) -> bool {
    match cat {
        Category::SemanticDictionary => probe.peak_token == sig.modal_peak_token,
        Category::SemanticConcept => probe.peak_role == TokenRole::Semantic,
        Category::Relationship => lt(probe.sparsity, cfg.relationship_max_median_sparsity),
        Category::SayX => {
            probe.peak_role == TokenRole::Functional && probe.target.is_some() && probe.target == sig.modal_target_token
        }
        Category::Ungrouped => false,
    }
}

/// True when at least `min_fraction` of the outcomes hold.
pub fn apply_stability_filter(outcomes: &[bool], min_fraction: f64) -> bool {
    !outcomes.is_empty() && ge(stability_fraction(outcomes), min_fraction)
}

fn stability_fraction(outcomes: &[bool]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|&&b| b).count() as f64 / outcomes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub feature: NodeId,
    pub layer: u32,
    pub category: Category,
    pub trace: RuleTrace,
}

pub fn classify_feature(sig: &Signature, n_layers: u32, cfg: &ClassifierConfig) -> Classification {
    let categories: Vec<CategoryTrace> = category_clauses(sig, cfg)
        .into_iter()
        .map(|(category, clauses)| CategoryTrace {
            category,
            passed: clauses.iter().all(|c| c.passed),
            clauses,
            confidence: category_confidence(sig, category),
            alignment_score: alignment_score(sig, category, n_layers, cfg),
        })
        .collect();

    // `categories` is already in priority order, so the first best wins ties.
    let mut best: Option<&CategoryTrace> = None;
    for t in categories.iter().filter(|t| t.passed) {
        let better = match best {
            None => true,
            Some(b) => {
                t.alignment_score > b.alignment_score + EPS
                    || ((t.alignment_score - b.alignment_score).abs() <= EPS && t.confidence > b.confidence + EPS)
            }
        };
        if better {
            best = Some(t);
        }
    }

    let (chosen, candidate, stability, score, reason) = match best {
        None => (Category::Ungrouped, None, None, 0.0, "no category conditions met".to_owned()),
        Some(t) => {
            let outcomes: Vec<bool> = sig.probes.iter().map(|p| probe_satisfies(t.category, p, sig, cfg)).collect();
            let frac = stability_fraction(&outcomes);
            if apply_stability_filter(&outcomes, cfg.stability_min_fraction) {
                let others: Vec<&str> = categories
                    .iter()
                    .filter(|o| o.passed && o.category != t.category)
                    .map(|o| o.category.label())
                    .collect();
                let reason = if others.is_empty() {
                    format!("{} conditions met", t.category)
                } else {
                    format!("{} has highest alignment over {}", t.category, others.join(", "))
                };
                (t.category, Some(t.category), Some(frac), t.alignment_score, reason)
            } else {
                let reason = format!(
                    "{} unstable: {:.0}% of probes < {:.0}%",
                    t.category,
                    frac * 100.0,
                    cfg.stability_min_fraction * 100.0
                );
                (Category::Ungrouped, Some(t.category), Some(frac), t.alignment_score, reason)
            }
        }
    };

    Classification {
        feature: sig.feature.clone(),
        layer: sig.layer,
        category: chosen,
        trace: RuleTrace { categories, candidate, stability, chosen, alignment_score: score, reason },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameProvenance {
    SemanticPeak,
    SayXTarget,
    RelationshipAggregate,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supernode {
    pub name: String,
    pub category: Category,
    pub members: Vec<NodeId>,
    pub name_provenance: NameProvenance,
}

fn ranked_by_count<'a>(items: impl Iterator<Item = (&'a str, &'a str)>) -> Vec<(String, String)> {
    // (normalized, display) ranked by count desc, then normalized asc.
    let mut counts: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (norm, disp) in items {
        counts.entry(norm).or_insert((0, disp)).0 += 1;
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.0.cmp(b.0)));
    v.into_iter().map(|(n, (_, d))| (n.to_owned(), d.to_owned())).collect()
}

/// Semantic tokens ranked by activation mass summed over all probes.
pub fn relationship_candidates(
    records: &[ActivationRecord],
    extended_vocab: &BTreeSet<String>,
    vocab: &FunctionalVocabulary,
) -> Vec<String> {
    let mut mass: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        let Ok(roles) = label_tokens(&r.tokens, vocab) else { continue };
        for ((tok, role), a) in r.tokens.iter().zip(roles).zip(&r.activations) {
            let norm = normalize_token(tok);
            if role == TokenRole::Semantic && extended_vocab.contains(&norm) {
                *mass.entry(norm).or_default() += a;
            }
        }
    }
    let mut v: Vec<(String, f64)> = mass.into_iter().filter(|(_, m)| *m > 0.0).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(t, _)| t).collect()
}

/// All semantic tokens appearing in any probe.
pub fn extended_vocabulary<'a>(
    token_lists: impl IntoIterator<Item = &'a [String]>,
    vocab: &FunctionalVocabulary,
) -> BTreeSet<String> {
    token_lists
        .into_iter()
        .flat_map(|toks| toks.iter())
        .filter(|t| vocab.role(t) == TokenRole::Semantic)
        .map(|t| normalize_token(t))
        .collect()
}

fn name_candidates(
    cat: Category,
    sig: &Signature,
    records: &[ActivationRecord],
    extended: &BTreeSet<String>,
    vocab: &FunctionalVocabulary,
) -> Vec<(String, String)> {
    match cat {
        Category::SemanticDictionary | Category::SemanticConcept => {
            let mut c = ranked_by_count(
                sig.probes
                    .iter()
                    .filter(|p| p.peak_role == TokenRole::Semantic)
                    .map(|p| (p.peak_token.as_str(), p.peak_display.as_str())),
            );
            if c.is_empty() {
                c.push((sig.modal_peak_token.clone(), sig.modal_peak_display.clone()));
            }
            c
        }
        Category::SayX => ranked_by_count(
            sig.probes.iter().filter_map(|p| Some((p.target.as_deref()?, p.target_display.as_deref()?))),
        )
        .into_iter()
        .map(|(n, d)| (n, format!("Say {d}")))
        .collect(),
        Category::Relationship => relationship_candidates(records, extended, vocab)
            .into_iter()
            .map(|t| (t.clone(), format!("({t}) related")))
            .collect(),
        Category::Ungrouped => Vec::new(),
    }
}

/// Group classified features into named, disjoint supernodes.
///
/// `records` maps each feature to its per-probe records (used for
/// relationship naming). Name clashes across categories get a ` #k` suffix.
pub fn build_supernodes(
    classified: &[(Signature, Classification)],
    records: &BTreeMap<NodeId, Vec<ActivationRecord>>,
    vocab: &FunctionalVocabulary,
) -> Vec<Supernode> {
    let extended = extended_vocabulary(records.values().flat_map(|rs| rs.iter().map(|r| r.tokens.as_slice())), vocab);
    let mut groups: BTreeMap<(Category, String), BTreeSet<NodeId>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (sig, cls) in classified {
        if cls.category == Category::Ungrouped || !seen.insert(sig.feature.clone()) {
            continue;
        }
        let recs = records.get(&sig.feature).map(Vec::as_slice).unwrap_or(&[]);
        let name = name_candidates(cls.category, sig, recs, &extended, vocab)
            .into_iter()
            .find(|(norm, _)| !vocab.is_blacklisted(norm))
            .map(|(_, display)| display)
            .unwrap_or_else(|| format!("{} #{}", cls.category.label(), sig.feature));
        groups.entry((cls.category, name)).or_default().insert(sig.feature.clone());
    }

    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for cat in Category::PRIORITY {
        for ((c, name), members) in groups.iter().filter(|((c, _), _)| *c == cat) {
            let n = used.entry(name.clone()).or_default();
            *n += 1;
            let name = if *n == 1 { name.clone() } else { format!("{name} #{n}") };
            out.push(Supernode {
                name,
                category: *c,
                members: members.iter().cloned().collect(),
                name_provenance: match c {
                    Category::SayX => NameProvenance::SayXTarget,
                    Category::Relationship => NameProvenance::RelationshipAggregate,
                    _ => NameProvenance::SemanticPeak,
                },
            });
        }
    }
    out
}

/// Counts per category, keyed by category label.
pub fn summarize(classifications: &[Classification]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for c in classifications {
        *m.entry(c.category.label().to_owned()).or_default() += 1;
    }
    m
}

/// Grouping table `feature_id,layer,category,supernode_name,alignment_score,stability,reason`.
pub fn write_grouping_csv<W: Write>(
    classifications: &[Classification],
    supernodes: &[Supernode],
    out: W,
) -> Result<(), IoError> {
    let names: BTreeMap<&NodeId, &str> =
        supernodes.iter().flat_map(|s| s.members.iter().map(move |m| (m, s.name.as_str()))).collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["feature_id", "layer", "category", "supernode_name", "alignment_score", "stability", "reason"])?;
    for c in classifications {
        w.write_record([
            c.feature.to_string(),
            c.layer.to_string(),
            c.category.label().to_owned(),
            names.get(&c.feature).copied().unwrap_or("").to_owned(),
            format!("{:.6}", c.trace.alignment_score),
            c.trace.stability.map(|s| format!("{s:.6}")).unwrap_or_default(),
            c.trace.reason.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::MappingRule;
    use proptest::prelude::*;

    pub(crate) fn sig(layer: u32) -> Signature {
        Signature {
            feature: "f".into(),
            layer,
            peak_consistency: 0.0,
            n_distinct_peaks: 5,
            func_vs_sem: 0.0,
            semantic_conf: 0.0,
            conf_functional: 0.0,
            median_sparsity: 0.9,
            modal_peak_token: "x".into(),
            modal_peak_display: "x".into(),
            modal_target_token: None,
            modal_target_display: None,
            modal_semantic_token: None,
            modal_semantic_display: None,
            n_probes: 5,
            role_consistency: 1.0,
            mean_cosine_to_seed: 0.0,
            mean_density: 0.0,
            probes: Vec::new(),
        }
    }

    fn peak(token: &str, role: TokenRole, target: Option<&str>, sparsity: f64) -> ProbePeak {
        ProbePeak {
            probe_id: String::new(),
            peak_token: token.to_lowercase(),
            peak_display: token.into(),
            peak_role: role,
            target: target.map(str::to_lowercase),
            target_display: target.map(String::from),
            rule: MappingRule::Forward,
            sparsity,
        }
    }

    fn with_probes(mut s: Signature, probes: Vec<ProbePeak>) -> Signature {
        s.probes = probes
            .into_iter()
            .enumerate()
            .map(|(i, mut p)| {
                p.probe_id = format!("p{i}");
                p
            })
            .collect();
        s.n_probes = s.probes.len();
        s
    }

    fn semantic_probes(tok: &str, n: usize) -> Vec<ProbePeak> {
        (0..n).map(|_| peak(tok, TokenRole::Semantic, Some(tok), 0.9)).collect()
    }

    #[test]
    fn dictionary_example() {
        let mut s = sig(2);
        s.peak_consistency = 0.9;
        s.n_distinct_peaks = 1;
        s.median_sparsity = 0.6;
        s.semantic_conf = 1.0;
        s.modal_peak_token = "capital".into();
        let s = with_probes(s, semantic_probes("capital", 5));
        let c = classify_feature(&s, 26, &ClassifierConfig::default());
        assert_eq!(c.category, Category::SemanticDictionary);
    }

    #[test]
    fn sayx_example() {
        let mut s = sig(16);
        s.func_vs_sem = 0.8;
        s.conf_functional = 0.95;
        s.modal_target_token = Some("austin".into());
        let probes = (0..5).map(|_| peak("is", TokenRole::Functional, Some("Austin"), 0.9)).collect();
        let s = with_probes(s, probes);
        let c = classify_feature(&s, 26, &ClassifierConfig::default());
        assert_eq!(c.category, Category::SayX);
        assert!(c.trace.categories.iter().find(|t| t.category == Category::SayX).unwrap().passed);
    }

    #[test]
    fn relationship_example() {
        let mut s = sig(5);
        s.median_sparsity = 0.30;
        s.peak_consistency = 0.4;
        let probes = (0..5).map(|_| peak("texas", TokenRole::Semantic, None, 0.3)).collect();
        let s = with_probes(s, probes);
        let c = classify_feature(&s, 26, &ClassifierConfig::default());
        assert_eq!(c.category, Category::Relationship);
    }

    #[test]
    fn nothing_passes_is_ungrouped() {
        let s = with_probes(sig(5), semantic_probes("x", 5));
        let c = classify_feature(&s, 26, &ClassifierConfig::default());
        assert_eq!(c.category, Category::Ungrouped);
        assert_eq!(c.trace.candidate, None);
    }

    #[test]
    fn stability_boundary() {
        assert!(apply_stability_filter(&[true, true, true, false, false], 0.6));
        assert!(!apply_stability_filter(&[true, true, false, false, false], 0.6));
        assert!(!apply_stability_filter(&[], 0.6));
    }

    #[test]
    fn unstable_winner_is_ungrouped() {
        let mut s = sig(1);
        s.semantic_conf = 1.0;
        let mut probes = semantic_probes("capital", 2);
        probes.extend((0..3).map(|_| peak("is", TokenRole::Functional, None, 0.9)));
        let s = with_probes(s, probes);
        let c = classify_feature(&s, 26, &ClassifierConfig::default());
        assert_eq!(c.trace.candidate, Some(Category::SemanticConcept));
        assert_eq!(c.category, Category::Ungrouped);
        assert_eq!(c.trace.stability, Some(0.4));
    }

    #[test]
    fn concept_floor_is_configurable() {
        let mut s = sig(1);
        s.semantic_conf = 1.0;
        s.peak_consistency = 0.3;
        let s = with_probes(s, semantic_probes("capital", 5));
        let mut cfg = ClassifierConfig::default();
        assert_eq!(classify_feature(&s, 26, &cfg).category, Category::SemanticConcept);
        cfg.concept_min_peak_consistency = Some(0.5);
        assert_eq!(classify_feature(&s, 26, &cfg).category, Category::Ungrouped);
    }

    #[test]
    fn config_yaml_defaults_fill_in() {
        let cfg = ClassifierConfig::from_yaml_str("sayx_min_layer: 9\n").unwrap();
        assert_eq!(cfg.sayx_min_layer, 9);
        assert_eq!(cfg.dict_min_peak_consistency, 0.80);
    }

    fn classified(s: Signature, cat: Category) -> (Signature, Classification) {
        let mut c = classify_feature(&s, 26, &ClassifierConfig::default());
        c.category = cat;
        (s, c)
    }

    #[test]
    fn naming_and_collisions() {
        let mut a = with_probes(sig(1), semantic_probes("capital", 3));
        a.feature = "a".into();
        let mut b = with_probes(sig(2), semantic_probes("capital", 3));
        b.feature = "b".into();
        let mut c =
            with_probes(sig(20), (0..3).map(|_| peak("is", TokenRole::Functional, Some("Austin"), 0.9)).collect());
        c.feature = "c".into();
        let mut d = with_probes(sig(3), semantic_probes("concept", 3));
        d.probes.push(peak("Texas", TokenRole::Semantic, None, 0.9));
        d.feature = "d".into();
        let items = vec![
            classified(a, Category::SemanticConcept),
            classified(b, Category::SemanticDictionary),
            classified(c, Category::SayX),
            classified(d, Category::SemanticConcept),
        ];
        let sn = build_supernodes(&items, &BTreeMap::new(), &FunctionalVocabulary::english());
        let names: Vec<_> = sn.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["Say Austin", "capital", "Texas", "capital #2"]);
        let total: usize = sn.iter().map(|s| s.members.len()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn relationship_name_from_activation_mass() {
        let toks: Vec<String> = ["The", " capital", " of", " Texas"].iter().map(|s| s.to_string()).collect();
        let rec = ActivationRecord {
            feature: "r".into(),
            probe_id: "p0".into(),
            tokens: toks,
            activations: vec![0.2, 0.5, 0.4, 0.9],
            cosine_to_seed: 0.0,
            robust_z: 0.0,
            peak_position: 3,
            peak_token: "Texas".into(),
            density: 0.25,
            sparsity: 0.3,
        };
        let mut s = with_probes(sig(1), vec![peak("Texas", TokenRole::Semantic, None, 0.3)]);
        s.feature = "r".into();
        let records = BTreeMap::from([(NodeId::from("r"), vec![rec])]);
        let sn = build_supernodes(&[classified(s, Category::Relationship)], &records, &FunctionalVocabulary::english());
        assert_eq!(sn[0].name, "(texas) related");
        assert_eq!(sn[0].name_provenance, NameProvenance::RelationshipAggregate);
    }

    proptest! {
        #[test]
        fn chosen_category_is_justified(
            layer in 0u32..26,
            pc in 0.0f64..=1.0,
            nd in 1usize..5,
            fvs in 0.0f64..=1.0,
            sc in 0.0f64..=1.0,
            cf in 0.0f64..=1.0,
            ms in 0.0f64..=1.0,
            flags in prop::collection::vec(any::<(bool, bool)>(), 1..8),
        ) {
            let mut s = sig(layer);
            s.peak_consistency = pc;
            s.n_distinct_peaks = nd;
            s.func_vs_sem = fvs;
            s.semantic_conf = sc;
            s.conf_functional = cf;
            s.median_sparsity = ms;
            s.modal_peak_token = "capital".into();
            s.modal_target_token = Some("austin".into());
            let probes = flags
                .iter()
                .map(|&(func, low)| {
                    if func {
                        peak("is", TokenRole::Functional, Some("Austin"), if low { 0.2 } else { 0.9 })
                    } else {
                        peak("capital", TokenRole::Semantic, Some("capital"), if low { 0.2 } else { 0.9 })
                    }
                })
                .collect();
            let s = with_probes(s, probes);
            let cfg = ClassifierConfig::default();
            let c = classify_feature(&s, 26, &cfg);
            prop_assert_eq!(c.clone(), classify_feature(&s, 26, &cfg));
            if c.category != Category::Ungrouped {
                let t = c.trace.categories.iter().find(|t| t.category == c.category).unwrap();
                prop_assert!(t.clauses.iter().all(|cl| cl.passed));
                for o in c.trace.categories.iter().filter(|o| o.passed) {
                    prop_assert!(o.alignment_score <= t.alignment_score + 1e-12);
                }
            }
        }

        #[test]
        fn stability_is_monotone_under_added_successes(
            outcomes in prop::collection::vec(any::<bool>(), 1..20),
        ) {
            if apply_stability_filter(&outcomes, 0.6) {
                let mut more = outcomes.clone();
                more.push(true);
                prop_assert!(apply_stability_filter(&more, 0.6));
            }
        }
    }
}
