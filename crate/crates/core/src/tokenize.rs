//! Token counting.
//!
//! The default [`RuleTokenizer`] splits text into maximal runs of word
//! characters (Unicode alphanumerics and `_`); every other non-whitespace
//! character is a token of its own. Whitespace only separates tokens.
//!
//! Because whitespace never belongs to a token, counts are additive across
//! whitespace-joined pieces: `count("a\nb") == count("a") + count("b")`.
//! The knowledge-base allocator relies on this.

use std::fmt;
use std::sync::Arc;

/// Anything that can count tokens in a string.
pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn count(&self, text: &str) -> usize;

    /// Stable identifier recorded in artifacts built with this tokenizer.
    fn name(&self) -> &str;
}

/// Shared handle used throughout the engine.
pub type SharedTokenizer = Arc<dyn Tokenizer>;

#[derive(Debug, Default, Clone, Copy)]
pub struct RuleTokenizer;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl RuleTokenizer {
    /// Iterate over tokens as string slices.
    pub fn tokens<'a>(&self, text: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        Tokens { rest: text }
    }
}

impl Tokenizer for RuleTokenizer {
    fn count(&self, text: &str) -> usize {
        self.tokens(text).count()
    }

    fn name(&self) -> &str {
        "rule-v1"
    }
}

struct Tokens<'a> {
    rest: &'a str,
}

impl<'a> Iterator for Tokens<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let trimmed = self.rest.trim_start();
        let mut chars = trimmed.char_indices();
        let (_, first) = chars.next()?;
        let end = if is_word_char(first) {
            chars
                .find(|&(_, c)| !is_word_char(c))
                .map(|(i, _)| i)
                .unwrap_or(trimmed.len())
        } else {
            first.len_utf8()
        };
        let (tok, rest) = trimmed.split_at(end);
        self.rest = rest;
        Some(tok)
    }
}

/// Resolve a tokenizer by the name stored in configs and index headers.
pub fn by_name(name: &str) -> Option<SharedTokenizer> {
    match name {
        "rule-v1" | "rule" => Some(Arc::new(RuleTokenizer)),
        _ => None,
    }
}

pub fn default_tokenizer() -> SharedTokenizer {
    Arc::new(RuleTokenizer)
}
