// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe prompts exactly as the pipeline builds them, plus a toy tokenizer.

use probegraph_acquisition::concepts::{generate_concepts, TemplateBackend};
use probegraph_acquisition::probes::{seed_probe, synthesize_probes, ProbePrompt, ProbeTemplates};
use probegraph_core::lexicon::{normalize_token, FunctionalVocabulary};

/// Whitespace words with leading and trailing punctuation split off. The
/// first piece of every word but the first carries a leading space.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (wi, word) in text.split_whitespace().enumerate() {
        let chars: Vec<char> = word.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric()).unwrap_or(chars.len());
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).map_or(start, |e| e + 1);
        let mut first = true;
        let mut push = |piece: String, is_punct: bool| {
            let marked = first && wi > 0 && !is_punct;
            first = false;
            out.push(if marked { format!(" {piece}") } else { piece });
        };
        for c in &chars[..start] {
            push(c.to_string(), true);
        }
        if start < end {
            push(chars[start..end].iter().collect(), false);
        }
        for c in &chars[end.max(start)..] {
            push(c.to_string(), true);
        }
    }
    out
}

/// Seed prompt text the pipeline derives from the graph's prompt tokens.
pub fn prompt_text(tokens: &[String]) -> String {
    tokens.concat().trim().to_owned()
}

/// The seed probe followed by every synthesized probe, tokens filled in.
pub fn probe_set(prompt_tokens: &[String], target: &str) -> Vec<ProbePrompt> {
    let backend = TemplateBackend { vocab: FunctionalVocabulary::english() };
    let mut concepts = generate_concepts(prompt_tokens, 8, &backend).expect("template concepts");
    concepts.iter_mut().for_each(|c| c.accepted = true);
    let seed = prompt_text(prompt_tokens);
    let mut out = vec![seed_probe(&seed)];
    out.extend(
        synthesize_probes(&concepts, &seed, target.trim(), &ProbeTemplates::default()).expect("default templates"),
    );
    for p in &mut out {
        p.tokens = tokenize(&p.text);
    }
    out
}

/// Positions whose normalized token equals `norm`.
pub fn positions(tokens: &[String], norm: &str) -> Vec<usize> {
    tokens.iter().enumerate().filter(|(_, t)| normalize_token(t) == norm).map(|(i, _)| i).collect()
}

pub fn last(tokens: &[String], norm: &str) -> usize {
    *positions(tokens, norm).last().unwrap_or_else(|| panic!("no `{norm}` in {tokens:?}"))
}
