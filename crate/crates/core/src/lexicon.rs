// SPDX-License-Identifier: MIT OR Apache-2.0

//! Functional vs semantic token roles and target-token mapping.
//!
//! A feature that peaks on a functional token ("is", "the", "of") is mapped
//! to the nearest semantic token within a window. The search direction comes
//! from the vocabulary's directionality table: forward for copulas, articles
//! and most prepositions, backward for `of` and the possessive `'s`, and
//! nearest-either-way for conjunctions and list punctuation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::LexiconError;

pub const DEFAULT_WINDOW: usize = 7;
/// Narrower preset some users prefer for short prompts.
pub const NARROW_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Functional,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

const ENGLISH_FUNCTIONAL: &[&str] = &[
    // copulas
    "is", "was", "are", "were", "be", "been", "being", "am", "'s", "'re", "'m", // articles and determiners
    "the", "a", "an", "this", "that", "these", "those", // prepositions
    "of", "in", "on", "at", "to", "for", "with", "by", "from", "as", "into", "onto", "upon", "about", "above", "below",
    "between", "among", "through", "during", "before", "after", // conjunctions
    "and", "or", "but", "nor", "so", "yet", // relative pronouns and adverbs
    "which", "who", "whom", "whose", "where", "when", "why", "how", // auxiliaries
    "do", "does", "did", "have", "has", "had", "will", "would", "shall", "should", "can", "could", "may", "might",
    "must", // pronouns, negation and other connectives
    "it", "its", "they", "them", "their", "he", "his", "she", "her", "we", "our", "you", "your", "not", "than",
    "there", "also", "whether",
];

const ENGLISH_BACKWARD: &[&str] = &["of", "'s"];
const ENGLISH_BIDIRECTIONAL: &[&str] = &["and", "or", "but", ",", ":", ";"];
const ENGLISH_BLACKLIST: &[&str] = &["concept", "process", "based", "thing", "things"];

/// Per-language functional vocabulary with directionality and naming blacklist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalVocabulary {
    pub language: String,
    #[serde(rename = "functional_tokens")]
    pub entries: BTreeSet<String>,
    #[serde(default)]
    pub directionality: BTreeMap<String, Direction>,
    #[serde(default)]
    pub blacklist: BTreeSet<String>,
}

impl FunctionalVocabulary {
    /// English defaults: copulas, articles, prepositions, conjunctions,
    /// relative pronouns, auxiliaries and a few pronouns (87 entries).
    pub fn english() -> Self {
        let mut directionality = BTreeMap::new();
        for t in ENGLISH_BACKWARD {
            directionality.insert(t.to_string(), Direction::Backward);
        }
        for t in ENGLISH_BIDIRECTIONAL {
            directionality.insert(t.to_string(), Direction::Bidirectional);
        }
        Self {
            language: "en".into(),
            entries: ENGLISH_FUNCTIONAL.iter().map(|s| s.to_string()).collect(),
            directionality,
            blacklist: ENGLISH_BLACKLIST.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Load from the YAML layout
    /// `{language, functional_tokens, directionality, blacklist}`.
    pub fn from_yaml_str(text: &str) -> Result<Self, LexiconError> {
        let mut vocab: Self = serde_yaml::from_str(text).map_err(|e| LexiconError::Config(e.to_string()))?;
        vocab.entries = vocab.entries.iter().map(|t| normalize_token(t)).collect();
        vocab.directionality = vocab.directionality.into_iter().map(|(k, v)| (normalize_token(&k), v)).collect();
        vocab.blacklist = vocab.blacklist.iter().map(|t| normalize_token(t)).collect();
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(self).expect("vocabulary serialization is infallible")
    }

    pub fn validate(&self) -> Result<(), LexiconError> {
        if self.entries.is_empty() {
            return Err(LexiconError::EmptyVocabulary);
        }
        if let Some(k) = self.directionality.keys().find(|k| !self.entries.contains(*k) && !is_punctuation(k)) {
            return Err(LexiconError::UnknownDirectionalityKey(k.clone()));
        }
        Ok(())
    }

    /// Role of a single raw token.
    pub fn role(&self, token: &str) -> TokenRole {
        let norm = normalize_token(token);
        if norm.is_empty() || is_punctuation(&norm) || self.entries.contains(&norm) {
            TokenRole::Functional
        } else {
            TokenRole::Semantic
        }
    }

    /// Search direction for a functional token; unlisted tokens look forward.
    pub fn direction(&self, token: &str) -> Direction {
        let norm = normalize_token(token);
        self.directionality.get(&norm).copied().unwrap_or(Direction::Forward)
    }

    pub fn is_blacklisted(&self, token: &str) -> bool {
        self.blacklist.contains(&normalize_token(token))
    }
}

fn strip_marker(token: &str) -> &str {
    for marker in [' ', '\u{2581}', '\u{0120}', '_'] {
        if let Some(rest) = token.strip_prefix(marker) {
            return rest;
        }
    }
    token
}

fn has_marker(token: &str) -> bool {
    strip_marker(token).len() != token.len()
}

/// True for non-empty strings made only of punctuation or symbols.
pub fn is_punctuation(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| !c.is_alphanumeric() && !c.is_whitespace())
}

/// Canonical comparison form: one leading sentencepiece/space marker removed,
/// lowercased, trailing punctuation stripped. Pure punctuation is kept as is.
pub fn normalize_token(token: &str) -> String {
    let stripped = strip_marker(token).trim();
    let lower = stripped.to_lowercase();
    if is_punctuation(&lower) {
        return lower;
    }
    lower.trim_end_matches(|c: char| !c.is_alphanumeric()).to_owned()
}

/// Human-facing form: marker removed, case kept, trailing punctuation stripped.
pub fn display_token(token: &str) -> String {
    let stripped = strip_marker(token).trim();
    if is_punctuation(stripped) {
        return stripped.to_owned();
    }
    stripped.trim_end_matches(|c: char| !c.is_alphanumeric()).to_owned()
}

pub fn label_tokens(tokens: &[String], vocab: &FunctionalVocabulary) -> Result<Vec<TokenRole>, LexiconError> {
    if vocab.entries.is_empty() {
        return Err(LexiconError::EmptyVocabulary);
    }
    if tokens.is_empty() {
        return Err(LexiconError::EmptyTokens);
    }
    Ok(tokens.iter().map(|t| vocab.role(t)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingRule {
    Forward,
    Backward,
    Bidirectional,
    SelfSemantic,
    NoTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMapping {
    pub source_position: usize,
    pub target_position: Option<usize>,
    /// Display form of the target token.
    pub target_token: Option<String>,
    pub rule_fired: MappingRule,
}

impl TargetMapping {
    /// Functional peak with no semantic token in reach.
    pub fn is_functional_only(&self) -> bool {
        self.rule_fired == MappingRule::NoTarget
    }

    pub fn normalized_target(&self) -> Option<String> {
        self.target_token.as_deref().map(normalize_token)
    }
}

/// Resolve the semantic target of a peak at `peak_position`.
pub fn map_target(
    tokens: &[String],
    roles: &[TokenRole],
    peak_position: usize,
    window: usize,
    vocab: &FunctionalVocabulary,
) -> Result<TargetMapping, LexiconError> {
    let len = tokens.len();
    if peak_position >= len || roles.len() != len {
        return Err(LexiconError::PositionOutOfRange { position: peak_position, len });
    }
    if window == 0 {
        return Err(LexiconError::ZeroWindow);
    }
    let hit = |pos: usize, rule: MappingRule| {
        let pos = first_subword(tokens, roles, pos, peak_position, window);
        TargetMapping {
            source_position: peak_position,
            target_position: Some(pos),
            target_token: Some(display_token(&tokens[pos])),
            rule_fired: rule,
        }
    };
    if roles[peak_position] == TokenRole::Semantic {
        return Ok(hit(peak_position, MappingRule::SelfSemantic));
    }

    let semantic = |pos: usize| roles[pos] == TokenRole::Semantic;
    let forward = |d: usize| Some(peak_position + d).filter(|&p| p < len && semantic(p));
    let backward = |d: usize| peak_position.checked_sub(d).filter(|&p| semantic(p));

    let found = match vocab.direction(&tokens[peak_position]) {
        Direction::Forward => (1..=window).find_map(forward).map(|p| (p, MappingRule::Forward)),
        Direction::Backward => (1..=window).find_map(backward).map(|p| (p, MappingRule::Backward)),
        // Ties go forward.
        Direction::Bidirectional => {
            (1..=window).find_map(|d| forward(d).or_else(|| backward(d))).map(|p| (p, MappingRule::Bidirectional))
        }
    };
    Ok(match found {
        Some((pos, rule)) => hit(pos, rule),
        None => TargetMapping {
            source_position: peak_position,
            target_position: None,
            target_token: None,
            rule_fired: MappingRule::NoTarget,
        },
    })
}

/// Step back to the first subword of a split word, staying inside the window.
fn first_subword(tokens: &[String], roles: &[TokenRole], mut pos: usize, peak: usize, window: usize) -> usize {
    if !tokens.iter().any(|t| has_marker(t)) {
        return pos;
    }
    while pos > 0
        && pos != peak
        && pos - 1 != peak
        && peak.abs_diff(pos - 1) <= window
        && roles[pos - 1] == TokenRole::Semantic
        && !has_marker(&tokens[pos])
        && tokens[pos].chars().next().is_some_and(char::is_alphanumeric)
    {
        pos -= 1;
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn map(tokens: &[&str], peak: usize) -> TargetMapping {
        let v = FunctionalVocabulary::english();
        let t = toks(tokens);
        let roles = label_tokens(&t, &v).unwrap();
        map_target(&t, &roles, peak, DEFAULT_WINDOW, &v).unwrap()
    }

    #[test]
    fn english_default_size() {
        let v = FunctionalVocabulary::english();
        assert_eq!(v.entries.len(), 87);
        v.validate().unwrap();
    }

    #[test]
    fn labels_capital_prompt() {
        use TokenRole::*;
        let v = FunctionalVocabulary::english();
        let roles = label_tokens(&toks(&["The", " capital", " of", " Texas", " is"]), &v).unwrap();
        assert_eq!(roles, [Functional, Semantic, Functional, Semantic, Functional]);
        assert_eq!(label_tokens(&toks(&["Austin"]), &v).unwrap(), [Semantic]);
        assert_eq!(label_tokens(&toks(&[","]), &v).unwrap(), [Functional]);
    }

    #[test]
    fn french_copula_is_semantic_under_english() {
        let v = FunctionalVocabulary::english();
        assert_eq!(v.role(" est"), TokenRole::Semantic);
    }

    #[test]
    fn empty_inputs() {
        let mut v = FunctionalVocabulary::english();
        assert_eq!(label_tokens(&[], &v), Err(LexiconError::EmptyTokens));
        v.entries.clear();
        assert_eq!(label_tokens(&toks(&["a"]), &v), Err(LexiconError::EmptyVocabulary));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_token(" Texas"), "texas");
        assert_eq!(normalize_token("\u{2581}Austin,"), "austin");
        assert_eq!(normalize_token(" ,"), ",");
        assert_eq!(normalize_token("'s"), "'s");
        assert_eq!(display_token(" Austin."), "Austin");
    }

    #[test]
    fn copula_looks_forward() {
        let m = map(&["The", " capital", " is", " Austin"], 2);
        assert_eq!(m.target_token.as_deref(), Some("Austin"));
        assert_eq!(m.rule_fired, MappingRule::Forward);
    }

    #[test]
    fn of_looks_backward_to_head_noun() {
        let m = map(&["capital", " of", " Texas"], 1);
        assert_eq!(m.target_token.as_deref(), Some("capital"));
        assert_eq!(m.rule_fired, MappingRule::Backward);
    }

    #[test]
    fn possessive_looks_backward() {
        let m = map(&["Texas", "'s", " capital"], 1);
        assert_eq!(m.target_token.as_deref(), Some("Texas"));
    }

    #[test]
    fn semantic_peak_maps_to_itself() {
        let m = map(&["The", " capital", " of", " Texas", " is"], 3);
        assert_eq!(m.rule_fired, MappingRule::SelfSemantic);
        assert_eq!(m.target_token.as_deref(), Some("Texas"));
    }

    #[test]
    fn bidirectional_prefers_forward_on_ties() {
        let m = map(&["Texas", " and", " Oklahoma"], 1);
        assert_eq!(m.target_token.as_deref(), Some("Oklahoma"));
        let m = map(&["Texas", " and", " the", " Oklahoma"], 1);
        assert_eq!(m.target_token.as_deref(), Some("Texas"));
    }

    #[test]
    fn multi_token_entity_uses_first_token() {
        let m = map(&["capital", " is", " New", " York"], 1);
        assert_eq!(m.target_token.as_deref(), Some("New"));
        // Backward hit on a subword continuation steps to the word start.
        let m = map(&[" Sacra", "mento", "'s", " mayor"], 2);
        assert_eq!(m.target_token.as_deref(), Some("Sacra"));
    }

    #[test]
    fn no_semantic_in_window_is_functional_only() {
        let m = map(&["The", " capital", " of", " Texas", " is"], 4);
        assert!(m.is_functional_only());
        assert_eq!(m.target_position, None);
    }

    #[test]
    fn window_limits_search() {
        let v = FunctionalVocabulary::english();
        let t = toks(&["is", " the", " the", " Austin"]);
        let roles = label_tokens(&t, &v).unwrap();
        assert!(map_target(&t, &roles, 0, 2, &v).unwrap().is_functional_only());
        assert_eq!(map_target(&t, &roles, 0, 3, &v).unwrap().target_position, Some(3));
        assert_eq!(map_target(&t, &roles, 0, 0, &v), Err(LexiconError::ZeroWindow));
        assert!(matches!(map_target(&t, &roles, 9, 3, &v), Err(LexiconError::PositionOutOfRange { .. })));
    }

    #[test]
    fn yaml_round_trip_and_validation() {
        let v = FunctionalVocabulary::english();
        let back = FunctionalVocabulary::from_yaml_str(&v.to_yaml_string()).unwrap();
        assert_eq!(v, back);
        let bad = "language: xx\nfunctional_tokens: [le]\ndirectionality: {de: backward}\n";
        assert_eq!(FunctionalVocabulary::from_yaml_str(bad), Err(LexiconError::UnknownDirectionalityKey("de".into())));
        let empty = "language: xx\nfunctional_tokens: []\n";
        assert_eq!(FunctionalVocabulary::from_yaml_str(empty), Err(LexiconError::EmptyVocabulary));
    }

    proptest! {
        #[test]
        fn labeling_commutes_with_permutation(
            words in prop::collection::vec("[a-z]{1,6}|the|is|of|,", 1..12),
            seed in any::<u64>(),
        ) {
            let v = FunctionalVocabulary::english();
            let t: Vec<String> = words.clone();
            let roles = label_tokens(&t, &v).unwrap();
            let mut perm: Vec<usize> = (0..t.len()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let permuted: Vec<String> = perm.iter().map(|&i| t[i].clone()).collect();
            let proles = label_tokens(&permuted, &v).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(proles[k], roles[i]);
            }
        }

        #[test]
        fn targets_are_semantic_and_in_window(
            words in prop::collection::vec("[a-z]{1,6}|the|is|of|and|,", 1..16),
            peak_seed in any::<usize>(),
            window in 1usize..10,
        ) {
            let v = FunctionalVocabulary::english();
            let roles = label_tokens(&words, &v).unwrap();
            let peak = peak_seed % words.len();
            let m = map_target(&words, &roles, peak, window, &v).unwrap();
            if let Some(p) = m.target_position {
                prop_assert_eq!(roles[p], TokenRole::Semantic);
                prop_assert!(p.abs_diff(peak) <= window);
            }
        }

        #[test]
        fn wide_window_no_target_iff_side_has_no_semantic(
            words in prop::collection::vec("[a-z]{1,6}|the|is|of|and|,", 1..16),
            peak_seed in any::<usize>(),
        ) {
            let v = FunctionalVocabulary::english();
            let roles = label_tokens(&words, &v).unwrap();
            let peak = peak_seed % words.len();
            let m = map_target(&words, &roles, peak, words.len(), &v).unwrap();
            if roles[peak] == TokenRole::Functional {
                let after = roles[peak + 1..].contains(&TokenRole::Semantic);
                let before = roles[..peak].contains(&TokenRole::Semantic);
                let reachable = match v.direction(&words[peak]) {
                    Direction::Forward => after,
                    Direction::Backward => before,
                    Direction::Bidirectional => after || before,
                };
                prop_assert_eq!(m.is_functional_only(), !reachable);
            }
        }
    }
}
