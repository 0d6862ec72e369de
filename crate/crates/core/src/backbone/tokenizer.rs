//! Whitespace-plus-punctuation tokenizer with a corpus-built vocabulary.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const CLS_TOKEN: &str = "[CLS]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const CLS_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const PAD_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const SEP_ID: TokenId = 4;

const SPECIALS: [&str; 5] = [CLS_TOKEN, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN, SEP_TOKEN];

fn word_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("valid token regex"))
}

/// Splits text into word runs and single punctuation characters.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    word_pattern().find_iter(text).map(|m| m.as_str())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocabulary: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`. Specials come first at fixed ids,
    /// then `extra_words` in the given order, then corpus words by descending
    /// frequency (ties broken lexicographically).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, extra_words: &[&str]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut vocabulary: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in extra_words {
            if !vocabulary.iter().any(|v| v == w) {
                vocabulary.push(w.to_string());
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        for (w, _) in words {
            if !vocabulary.iter().any(|v| v == w) {
                vocabulary.push(w.to_string());
            }
        }
        Tokenizer::from_vocabulary(vocabulary).expect("built vocabulary is well formed")
    }

    pub fn from_vocabulary(vocabulary: Vec<String>) -> Result<Self, String> {
        if vocabulary.len() < SPECIALS.len()
            || vocabulary[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err("vocabulary must start with the reserved specials".into());
        }
        let mut index = HashMap::with_capacity(vocabulary.len());
        for (i, w) in vocabulary.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(format!("duplicate vocabulary entry {w:?}"));
            }
        }
        Ok(Tokenizer { vocabulary, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocabulary.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .map(|w| self.id_of(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn token_count(&self, text: &str) -> usize {
        split_words(text).count()
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn special_count() -> usize {
        SPECIALS.len()
    }
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = String;

    fn try_from(v: Vec<String>) -> Result<Self, String> {
        Tokenizer::from_vocabulary(v)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocabulary
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::build(
            ["if x { y = x ; }", "while x { x = x - 1 ; }"],
            &["yes", "no"],
        )
    }

    #[test]
    fn specials_are_pinned() {
        let t = toy();
        assert_eq!(t.id_of(CLS_TOKEN), Some(CLS_ID));
        assert_eq!(t.id_of(MASK_TOKEN), Some(MASK_ID));
        assert_eq!(t.id_of(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(t.id_of(UNK_TOKEN), Some(UNK_ID));
        assert_eq!(t.id_of(SEP_TOKEN), Some(SEP_ID));
        assert_eq!(t.vocab_size(), t.vocabulary().len());
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        assert!(toy().encode("").is_empty());
    }

    #[test]
    fn round_trip_on_known_words() {
        let t = toy();
        assert_eq!(t.decode(&t.encode("if x")), "if x");
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let t = toy();
        assert_eq!(t.encode("goto"), vec![UNK_ID]);
        assert!(t
            .encode("x goto y")
            .iter()
            .all(|&id| (id as usize) < t.vocab_size()));
    }

    #[test]
    fn punctuation_splits_into_single_tokens() {
        let words: Vec<_> = split_words("a+=b(c);").collect();
        assert_eq!(words, vec!["a", "+", "=", "b", "(", "c", ")", ";"]);
    }

    #[test]
    fn build_is_deterministic_and_frequency_ordered() {
        let t = toy();
        assert_eq!(t, toy());
        // "x" is the most frequent corpus word.
        assert_eq!(t.token(7), Some("x"));
    }

    #[test]
    fn rejects_vocabulary_without_specials() {
        assert!(Tokenizer::from_vocabulary(vec!["a".into()]).is_err());
    }
}
