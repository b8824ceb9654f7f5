// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe prompts that keep the seed's frame while varying the surrounding text.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::concepts::Concept;
use crate::error::AcquisitionError;

pub const MIN_PROBES_PER_CONCEPT: usize = 5;
pub const MAX_PROBES_PER_CONCEPT: usize = 10;
/// Probe id reserved for the seed prompt itself.
pub const SEED_PROBE_ID: &str = "seed";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePrompt {
    pub id: String,
    pub text: String,
    pub concept: String,
    /// Filled in from the activation service's tokenization.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<String>,
}

/// Frames with `{concept}`, `{seed}`, `{seed_lc}` and `{target}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTemplates {
    pub frames: Vec<String>,
}

impl Default for ProbeTemplates {
    fn default() -> Self {
        Self {
            frames: [
                "{concept}: {seed} {target}",
                "{concept}: Everyone knows that {seed_lc} {target}",
                "{concept}: Is it true that {seed_lc} {target}?",
                "{concept}: {target} is the answer, because {seed_lc} {target}",
                "{concept}: In the atlas, {seed_lc} {target}",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

const PLACEHOLDERS: [&str; 4] = ["{concept}", "{seed}", "{seed_lc}", "{target}"];

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn render(frame: &str, concept: &str, seed: &str, target: &str) -> Option<String> {
    let mut rest = frame.to_owned();
    for p in PLACEHOLDERS {
        rest = rest.replace(p, "");
    }
    if rest.contains('{') || rest.contains('}') {
        return None;
    }
    let text = frame
        .replace("{concept}", concept)
        .replace("{seed_lc}", &lower_first(seed))
        .replace("{seed}", seed)
        .replace("{target}", target);
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    (!text.is_empty()).then_some(text)
}

/// Probes for every accepted concept. Ids are `c{concept}p{frame}` over the
/// accepted concepts in order. Malformed or duplicate texts are dropped.
pub fn synthesize_probes(
    concepts: &[Concept],
    seed_prompt: &str,
    target: &str,
    templates: &ProbeTemplates,
) -> Result<Vec<ProbePrompt>, AcquisitionError> {
    let n = templates.frames.len();
    if !(MIN_PROBES_PER_CONCEPT..=MAX_PROBES_PER_CONCEPT).contains(&n) {
        return Err(AcquisitionError::InvalidTemplates(format!(
            "{n} frames; expected {MIN_PROBES_PER_CONCEPT} to {MAX_PROBES_PER_CONCEPT}"
        )));
    }
    let accepted: Vec<&Concept> = concepts.iter().filter(|c| c.accepted).collect();
    if accepted.is_empty() {
        return Err(AcquisitionError::EmptyAcceptedSet);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (ci, c) in accepted.iter().enumerate() {
        for (pi, frame) in templates.frames.iter().enumerate() {
            let Some(text) = render(frame, &c.label, seed_prompt.trim(), target.trim()) else {
                tracing::warn!(frame, "malformed probe frame skipped");
                continue;
            };
            if !seen.insert(text.clone()) {
                tracing::warn!(%text, "duplicate probe skipped");
                continue;
            }
            out.push(ProbePrompt { id: format!("c{ci}p{pi}"), text, concept: c.label.clone(), tokens: Vec::new() });
        }
    }
    Ok(out)
}

/// The seed prompt measured alongside the probes.
pub fn seed_probe(seed_prompt: &str) -> ProbePrompt {
    ProbePrompt {
        id: SEED_PROBE_ID.into(),
        text: seed_prompt.trim().to_owned(),
        concept: String::new(),
        tokens: Vec::new(),
    }
}
