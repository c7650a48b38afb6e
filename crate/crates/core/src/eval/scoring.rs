//! Generation scoring: does a label elicit its latent in synthetic text?

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::template::{conversation_request, CONVERSATION_SYSTEM};
use crate::lm::{generate_plain, FrozenLm, GenerationConfig, Sampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub messages: Vec<(Role, String)>,
    /// The text did not follow the tagged format and was kept verbatim as a
    /// single assistant message.
    pub parse_error: bool,
}

const TAGS: [(&str, Role); 2] = [("[USER]", Role::User), ("[ASSISTANT]", Role::Assistant)];

/// Split `[USER] ... [ASSISTANT] ...` text into messages.
pub fn parse_conversation(text: &str) -> Conversation {
    let fallback = || Conversation {
        messages: vec![(Role::Assistant, text.to_string())],
        parse_error: true,
    };
    let body = text.trim().trim_matches('"').trim();
    let mut marks: Vec<(usize, usize, Role)> = Vec::new();
    for (tag, role) in TAGS {
        marks.extend(body.match_indices(tag).map(|(i, _)| (i, tag.len(), role)));
    }
    marks.sort_by_key(|m| m.0);
    if marks.is_empty() || marks[0].0 != 0 {
        return fallback();
    }
    let mut messages = Vec::with_capacity(marks.len());
    for (k, &(start, len, role)) in marks.iter().enumerate() {
        let end = marks.get(k + 1).map_or(body.len(), |m| m.0);
        let content = body[start + len..end].trim();
        if content.is_empty() {
            return fallback();
        }
        messages.push((role, content.to_string()));
    }
    Conversation {
        messages,
        parse_error: false,
    }
}

/// Per-token activations of a named latent on a conversation. The first
/// value belongs to the beginning-of-text token.
pub trait ActivationOracle: Send + Sync {
    fn activations(&self, latent: &str, conversation: &Conversation) -> Result<Vec<f64>>;
}

/// Whitespace tokens of a conversation, preceded by a beginning-of-text marker.
pub fn conversation_tokens(conversation: &Conversation) -> Vec<String> {
    let mut out = vec!["<bos>".to_string()];
    for (_, text) in &conversation.messages {
        out.extend(text.split_whitespace().map(String::from));
    }
    out
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Activates (value 1) on any token equal to one of the latent's keywords,
/// compared case-insensitively with surrounding punctuation stripped.
#[derive(Debug, Clone, Default)]
pub struct KeywordOracle {
    keywords: BTreeMap<String, Vec<String>>,
}

impl KeywordOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_latent(mut self, latent: &str, keywords: &[&str]) -> Self {
        self.keywords
            .insert(latent.to_string(), keywords.iter().map(|k| normalize_word(k)).collect());
        self
    }

    /// Keywords taken from the words of each latent's label.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut o = Self::new();
        for (latent, label) in labels {
            let words: Vec<String> = label
                .split_whitespace()
                .map(normalize_word)
                .filter(|w| !w.is_empty())
                .collect();
            o.keywords.insert(latent.to_string(), words);
        }
        o
    }
}

impl ActivationOracle for KeywordOracle {
    fn activations(&self, latent: &str, conversation: &Conversation) -> Result<Vec<f64>> {
        let keys = self.keywords.get(latent).ok_or_else(|| Error::UnknownIds {
            ids: vec![latent.to_string()],
        })?;
        Ok(conversation_tokens(conversation)
            .iter()
            .map(|t| keys.contains(&normalize_word(t)) as u8 as f64)
            .collect())
    }
}

/// Produces the synthetic conversation text for one trial.
pub trait ConversationSource: Send + Sync {
    fn conversation(&self, label: &str, trial: usize) -> Result<String>;
}

/// Hard-prompts a backend with the conversation request (no injection).
pub struct LmConversations<'a> {
    pub lm: &'a dyn FrozenLm,
    pub sampling: Sampling,
    pub max_tokens: usize,
    pub seed: u64,
}

impl<'a> LmConversations<'a> {
    pub fn new(lm: &'a dyn FrozenLm, seed: u64) -> Self {
        Self {
            lm,
            sampling: Sampling::Nucleus {
                temperature: 0.7,
                top_p: 0.9,
            },
            max_tokens: crate::lm::DEFAULT_MAX_TOKENS,
            seed,
        }
    }
}

impl ConversationSource for LmConversations<'_> {
    fn conversation(&self, label: &str, trial: usize) -> Result<String> {
        let cfg = GenerationConfig {
            sampling: self.sampling,
            max_tokens: self.max_tokens,
            seed: super::grid::cell_seed(self.seed, label, trial),
        };
        Ok(generate_plain(self.lm, Some(CONVERSATION_SYSTEM), &conversation_request(label), &cfg)?.text)
    }
}

/// Fixed texts, cycled by trial index.
pub struct ScriptedConversations(pub Vec<String>);

impl ConversationSource for ScriptedConversations {
    fn conversation(&self, _label: &str, trial: usize) -> Result<String> {
        if self.0.is_empty() {
            return Err(Error::invalid("no scripted conversations"));
        }
        Ok(self.0[trial % self.0.len()].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScore {
    pub trials: usize,
    pub hits: usize,
    pub hit_rate: f64,
    pub any_hit: bool,
    pub parse_errors: usize,
}

/// A trial is a hit if any activation (after the first token, when
/// `exclude_first`) is nonzero.
pub fn is_hit(activations: &[f64], exclude_first: bool) -> bool {
    let skip = usize::from(exclude_first);
    activations.iter().skip(skip).any(|&a| a != 0.0)
}

pub fn score_activations(per_trial: &[Vec<f64>], exclude_first: bool) -> Result<GenerationScore> {
    if per_trial.is_empty() {
        return Err(Error::invalid("generation scoring needs at least one trial"));
    }
    let hits = per_trial.iter().filter(|a| is_hit(a, exclude_first)).count();
    Ok(GenerationScore {
        trials: per_trial.len(),
        hits,
        hit_rate: hits as f64 / per_trial.len() as f64,
        any_hit: hits > 0,
        parse_errors: 0,
    })
}

/// Generate `trials` conversations exhibiting `label`, and score them for `latent`.
pub fn generation_score(
    label: &str,
    latent: &str,
    source: &dyn ConversationSource,
    oracle: &dyn ActivationOracle,
    trials: usize,
    exclude_first: bool,
) -> Result<GenerationScore> {
    if trials == 0 {
        return Err(Error::invalid("generation scoring needs at least one trial"));
    }
    let mut acts = Vec::with_capacity(trials);
    let mut parse_errors = 0;
    for trial in 0..trials {
        let text = source.conversation(label, trial)?;
        let conv = parse_conversation(&text);
        parse_errors += conv.parse_error as usize;
        let a = oracle
            .activations(latent, &conv)
            .map_err(|e| Error::Oracle {
                trial,
                reason: e.to_string(),
            })?;
        acts.push(a);
    }
    let mut s = score_activations(&acts, exclude_first)?;
    s.parse_errors = parse_errors;
    Ok(s)
}
