//! Target template and the hard prompts used by baselines and scoring.

use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenId, PLACEHOLDER_MARKER};
use super::FrozenLm;
use crate::error::{Error, Result};

/// Which placeholder occurrences receive the injected embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSites {
    #[default]
    Both,
    AssistantOnly,
}

/// Explanation-seeking prompt with one placeholder in each message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTemplate {
    pub user_text: String,
    pub assistant_prefix: String,
    #[serde(default)]
    pub sites: InjectionSites,
}

/// Injection always happens at the embedding layer.
pub const INJECTION_LAYER: usize = 0;

impl Default for TargetTemplate {
    fn default() -> Self {
        Self {
            user_text: format!("What is the meaning of \"{PLACEHOLDER_MARKER}\"?"),
            assistant_prefix: format!("The meaning of \"{PLACEHOLDER_MARKER}\" is \""),
            sites: InjectionSites::Both,
        }
    }
}

/// A template tokenized for a particular backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTemplate {
    pub tokens: Vec<TokenId>,
    /// Every placeholder position, user occurrence first.
    pub placeholders: [usize; 2],
    /// Positions that receive the injection.
    pub slots: Vec<usize>,
}

impl RenderedTemplate {
    pub fn assistant_position(&self) -> usize {
        self.placeholders[1]
    }
}

impl TargetTemplate {
    pub fn new(user_text: impl Into<String>, assistant_prefix: impl Into<String>) -> Result<Self> {
        let t = Self {
            user_text: user_text.into(),
            assistant_prefix: assistant_prefix.into(),
            sites: InjectionSites::Both,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_sites(mut self, sites: InjectionSites) -> Self {
        self.sites = sites;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for text in [&self.user_text, &self.assistant_prefix] {
            let found = text.matches(PLACEHOLDER_MARKER).count();
            if found != 1 {
                return Err(Error::Placeholder { expected: 1, found });
            }
        }
        Ok(())
    }

    /// Tokenize through the backend's chat rendering and locate the placeholders.
    pub fn render(&self, lm: &dyn FrozenLm) -> Result<RenderedTemplate> {
        self.validate()?;
        let tokens = lm.render_chat(None, &self.user_text, &self.assistant_prefix);
        let placeholder = lm.tokenizer().special().placeholder;
        let found: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == placeholder)
            .map(|(i, _)| i)
            .collect();
        if found.len() != 2 {
            return Err(Error::Placeholder {
                expected: 2,
                found: found.len(),
            });
        }
        let placeholders = [found[0], found[1]];
        let slots = match self.sites {
            InjectionSites::Both => found,
            InjectionSites::AssistantOnly => vec![placeholders[1]],
        };
        Ok(RenderedTemplate {
            tokens,
            placeholders,
            slots,
        })
    }
}

/// Prompt asking the model to describe a topic without naming it.
pub fn taboo_prompt(topic_phrase: &str, original_title: &str, _category: Option<&str>) -> Result<String> {
    if original_title.trim().is_empty() {
        return Err(Error::invalid("taboo prompt needs a non-empty title"));
    }
    Ok(format!(
        "Describe {topic_phrase} without using the word \"{original_title}\", any part of it, \
         or obvious synonyms. Be specific enough that someone could guess what you're describing."
    ))
}

/// System message for synthetic-conversation generation.
pub const CONVERSATION_SYSTEM: &str = "You are a helpful AI assistant who generates EXTREMELY SHORT example conversations. The conversations are between a user and an assistant, and have the following format:\n[USER] I'm a user.\n[ASSISTANT] I'm the assistant.";

/// User message asking for a conversation exhibiting `label`.
pub fn conversation_request(label: &str) -> String {
    format!(
        "Produce a VERY SHORT conversation which exhibits '{label}'\nDo not include any other text in your response. Start immediately with the conversation."
    )
}

/// One-shot example that primes an immediate, reasoning-free answer.
pub const IMMEDIATE_ANSWER_EXAMPLE: (&str, &str) = (
    "Complete the following statement with only the name of a city. If you don't know, make your best guess. The capital of the country of origin of Tom Clancy's Rainbow Six Siege is",
    "Ottawa",
);

/// Prompt for answering a two-hop question immediately.
pub fn immediate_answer_prompt(category: &str, prompt: &str) -> String {
    format!(
        "Complete the following statement with only the name of a {category}. If you don't know, make your best guess. {prompt}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taboo_prompt_matches_example() {
        let p = taboo_prompt("bananas", "Banana", None).unwrap();
        assert_eq!(
            p,
            "Describe bananas without using the word \"Banana\", any part of it, or obvious synonyms. Be specific enough that someone could guess what you're describing."
        );
        assert!(p.contains("without using the word \"Banana\""));
        assert_eq!(p, taboo_prompt("bananas", "Banana", Some("fruit")).unwrap());
    }

    #[test]
    fn taboo_prompt_keeps_embedded_quotes() {
        let p = taboo_prompt("the film", "Say \"Cheese\"", None).unwrap();
        assert!(p.contains("the word \"Say \"Cheese\"\""));
        assert!(taboo_prompt("x", "  ", None).is_err());
    }

    #[test]
    fn default_template_has_one_placeholder_per_message() {
        let t = TargetTemplate::default();
        t.validate().unwrap();
        assert_eq!(t.user_text, "What is the meaning of \"<|reserved_special_token_0|>\"?");
        assert_eq!(
            t.assistant_prefix,
            "The meaning of \"<|reserved_special_token_0|>\" is \""
        );
        assert!(TargetTemplate::new("no marker", t.assistant_prefix.clone()).is_err());
    }

    #[test]
    fn conversation_request_inlines_label() {
        let m = conversation_request("event handling");
        assert!(m.starts_with("Produce a VERY SHORT conversation which exhibits 'event handling'\n"));
    }
}
