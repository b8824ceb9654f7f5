// SPDX-License-Identifier: MIT OR Apache-2.0

//! Candidate concepts for a seed prompt.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use probegraph_core::lexicon::{display_token, FunctionalVocabulary, TokenRole};

use crate::error::AcquisitionError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub label: String,
    pub rationale: String,
    #[serde(default)]
    pub accepted: bool,
}

pub trait ConceptBackend {
    fn propose(&self, seed_tokens: &[String], k: usize) -> Result<Vec<Concept>, AcquisitionError>;
}

/// Offline backend: one concept per semantic token of the seed prompt, plus a
/// relation joining the first semantic token to the functional token after it.
pub struct TemplateBackend {
    pub vocab: FunctionalVocabulary,
}

impl ConceptBackend for TemplateBackend {
    fn propose(&self, seed_tokens: &[String], _k: usize) -> Result<Vec<Concept>, AcquisitionError> {
        let roles: Vec<TokenRole> = seed_tokens.iter().map(|t| self.vocab.role(t)).collect();
        let mut out = Vec::new();
        for (t, r) in seed_tokens.iter().zip(&roles) {
            if *r == TokenRole::Semantic {
                out.push(Concept {
                    label: display_token(t),
                    rationale: "semantic token of the seed prompt".into(),
                    accepted: false,
                });
            }
        }
        let relation = (0..seed_tokens.len().saturating_sub(1))
            .find(|&i| roles[i] == TokenRole::Semantic && roles[i + 1] == TokenRole::Functional);
        if let Some(i) = relation {
            out.push(Concept {
                label: format!(
                    "{}-{}",
                    display_token(&seed_tokens[i]),
                    display_token(&seed_tokens[i + 1]).to_lowercase()
                ),
                rationale: "relation between a semantic token and the functional token after it".into(),
                accepted: false,
            });
        }
        Ok(out)
    }
}

pub const LLM_KEY_ENV: &str = "PROBEGRAPH_LLM_API_KEY";
pub const LLM_URL_ENV: &str = "PROBEGRAPH_LLM_BASE_URL";
pub const LLM_MODEL_ENV: &str = "PROBEGRAPH_LLM_MODEL";

/// OpenAI-compatible chat-completions backend. The model is asked for a JSON
/// array of `{label, rationale}` objects.
pub struct LlmBackend {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl LlmBackend {
    pub fn from_env() -> Self {
        Self {
            base_url: std::env::var(LLM_URL_ENV).unwrap_or_else(|_| "https://api.openai.com".into()),
            model: std::env::var(LLM_MODEL_ENV).unwrap_or_else(|_| "gpt-4o-mini".into()),
            api_key: std::env::var(LLM_KEY_ENV).ok(),
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct Proposed {
    label: String,
    #[serde(default)]
    rationale: String,
}

impl ConceptBackend for LlmBackend {
    fn propose(&self, seed_tokens: &[String], k: usize) -> Result<Vec<Concept>, AcquisitionError> {
        let key = self.api_key.as_deref().ok_or_else(|| AcquisitionError::Auth(format!("{LLM_KEY_ENV} is not set")))?;
        let prompt: String = seed_tokens.concat();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": "You list the concepts a language model must represent to complete a prompt. Reply with a JSON array of objects with keys label and rationale, nothing else."},
                {"role": "user", "content": format!("Prompt: {prompt}\nGive {k} concepts.")}
            ]
        });
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| AcquisitionError::BackendUnavailable(e.to_string()))?;
        let url = format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'));
        let resp = client
            .post(&url)
            .bearer_auth(key)
            .json(&body)
            .send()
            .map_err(|e| AcquisitionError::BackendUnavailable(e.to_string()))?;
        match resp.status().as_u16() {
            200..=299 => {}
            401 | 403 => return Err(AcquisitionError::Auth(resp.status().to_string())),
            _ => return Err(AcquisitionError::BackendUnavailable(resp.status().to_string())),
        }
        let chat: ChatResponse = resp.json().map_err(|e| AcquisitionError::BackendUnavailable(e.to_string()))?;
        let content = chat
            .choices
            .first()
            .map(|c| c.message.content.trim())
            .ok_or_else(|| AcquisitionError::BackendUnavailable("empty completion".into()))?;
        let start = content.find('[').unwrap_or(0);
        let end = content.rfind(']').map_or(content.len(), |i| i + 1);
        let items: Vec<Proposed> = serde_json::from_str(&content[start..end])?;
        Ok(items.into_iter().map(|p| Concept { label: p.label, rationale: p.rationale, accepted: false }).collect())
    }
}

/// Ask the backend for up to `k` concepts; blanks and case-insensitive
/// duplicates are dropped. Every concept starts unaccepted.
pub fn generate_concepts(
    seed_tokens: &[String],
    k: usize,
    backend: &dyn ConceptBackend,
) -> Result<Vec<Concept>, AcquisitionError> {
    if k == 0 {
        return Err(AcquisitionError::InvalidK);
    }
    let mut seen = BTreeSet::new();
    Ok(backend
        .propose(seed_tokens, k)?
        .into_iter()
        .map(|c| Concept { label: c.label.trim().to_owned(), accepted: false, ..c })
        .filter(|c| !c.label.is_empty() && seen.insert(c.label.to_lowercase()))
        .take(k)
        .collect())
}
