use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Placeholder marker used by the target template.
pub const PLACEHOLDER_MARKER: &str = "<|reserved_special_token_0|>";
/// End-of-turn marker appended to formatted training labels.
pub const EOT_MARKER: &str = "<|eot_id|>";

/// Token ids with a fixed role in every backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub placeholder: TokenId,
    pub eot: TokenId,
    pub bos: Option<TokenId>,
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
    fn special(&self) -> SpecialTokens;
}

/// Word-level tokenizer for the toy backends.
///
/// Ids 0..4 are reserved: placeholder, end-of-turn, `"` and `<unk>`. Every
/// other id is a word. Text splits on whitespace; runs of alphanumerics (plus
/// `_`, `'` and `-`) form words and any other character is its own token.
/// Lookup is case-sensitive; unknown pieces map to `<unk>`.
#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    pieces: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

pub const TOY_PLACEHOLDER: TokenId = 0;
pub const TOY_EOT: TokenId = 1;
pub const TOY_QUOTE: TokenId = 2;
pub const TOY_UNK: TokenId = 3;
pub const TOY_RESERVED: usize = 4;

impl ToyTokenizer {
    /// Vocabulary of `vocab_size` entries with words named `w4`, `w5`, ...
    pub fn numbered(vocab_size: usize) -> Result<Self> {
        if vocab_size < TOY_RESERVED {
            return Err(Error::invalid(format!(
                "toy vocabulary needs at least {TOY_RESERVED} entries"
            )));
        }
        let words = (TOY_RESERVED..vocab_size).map(|i| format!("w{i}")).collect();
        Self::with_words(words)
    }

    /// Reserved tokens followed by `words` (ids start at 4).
    pub fn with_words(words: Vec<String>) -> Result<Self> {
        let mut pieces = vec![
            PLACEHOLDER_MARKER.to_string(),
            EOT_MARKER.to_string(),
            "\"".to_string(),
            "<unk>".to_string(),
        ];
        pieces.extend(words);
        let mut lookup = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid toy token {p:?}")));
            }
            if lookup.insert(p.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate toy token {p:?}")));
            }
        }
        Ok(Self { pieces, lookup })
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.lookup.get(piece).copied()
    }

    fn push_word(&self, word: &str, out: &mut Vec<TokenId>) {
        if !word.is_empty() {
            out.push(self.lookup.get(word).copied().unwrap_or(TOY_UNK));
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '\'' | '-')
}

impl Tokenizer for ToyTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            if let Some(tail) = rest.strip_prefix(PLACEHOLDER_MARKER) {
                out.push(TOY_PLACEHOLDER);
                rest = tail;
                continue;
            }
            if let Some(tail) = rest.strip_prefix(EOT_MARKER) {
                out.push(TOY_EOT);
                rest = tail;
                continue;
            }
            let c = rest.chars().next().expect("non-empty");
            if c.is_whitespace() {
                rest = &rest[c.len_utf8()..];
            } else if is_word_char(c) {
                let end = rest
                    .char_indices()
                    .find(|&(_, ch)| !is_word_char(ch))
                    .map_or(rest.len(), |(i, _)| i);
                self.push_word(&rest[..end], &mut out);
                rest = &rest[end..];
            } else {
                let n = c.len_utf8();
                self.push_word(&rest[..n], &mut out);
                rest = &rest[n..];
            }
        }
        out
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.piece(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    fn special(&self) -> SpecialTokens {
        SpecialTokens {
            placeholder: TOY_PLACEHOLDER,
            eot: TOY_EOT,
            bos: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_template_and_markers() {
        let tok = ToyTokenizer::with_words(vec!["meaning".into(), "is".into()]).unwrap();
        let ids = tok.encode("The meaning of \"<|reserved_special_token_0|>\" is \"");
        assert_eq!(ids, vec![TOY_UNK, 4, TOY_UNK, TOY_QUOTE, TOY_PLACEHOLDER, TOY_QUOTE, 5, TOY_QUOTE]);
        assert_eq!(tok.encode("is\"<|eot_id|>"), vec![5, TOY_QUOTE, TOY_EOT]);
    }

    #[test]
    fn case_sensitive_words() {
        let tok = ToyTokenizer::with_words(vec!["apple".into(), "APPLE".into()]).unwrap();
        assert_eq!(tok.encode("apple APPLE Apple"), vec![4, 5, TOY_UNK]);
        assert_eq!(tok.decode(&[5, 4]), "APPLE apple");
    }

    #[test]
    fn numbered_vocab_size() {
        let tok = ToyTokenizer::numbered(32).unwrap();
        assert_eq!(tok.vocab_size(), 32);
        assert_eq!(tok.encode("w31 w4"), vec![31, 4]);
        assert!(ToyTokenizer::numbered(3).is_err());
        assert!(ToyTokenizer::with_words(vec!["a".into(), "a".into()]).is_err());
    }
}
