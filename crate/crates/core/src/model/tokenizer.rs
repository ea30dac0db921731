//! Whitespace word-level vocabulary with a fixed block of special tokens.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::CommonsenseParameter;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const IMG: &str = "<img>";
pub const PARAMS_MARKER: &str = "params:";
pub const INTERVENTION_MARKER: &str = "intervention:";

const RESERVED: [&str; 8] = [PAD, UNK, BOS, EOS, SEP, IMG, PARAMS_MARKER, INTERVENTION_MARKER];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SEP_ID: usize = 4;
pub const IMG_ID: usize = 5;
pub const PARAMS_ID: usize = 6;
pub const INTERVENTION_ID: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens, then every commonsense category name, then the words
    /// of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeSet<String> = CommonsenseParameter::ALL
            .iter()
            .map(|p| p.as_str().to_string())
            .collect();
        for t in texts {
            words.extend(normalize(t));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        Self::from_tokens(tokens).expect("reserved block is well formed")
    }

    /// Rebuilds a vocabulary from its token list (checkpoint manifests).
    pub fn from_tokens(tokens: Vec<String>) -> Option<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return None;
        }
        let ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        (ids.len() == tokens.len()).then_some(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize(text).map(|w| self.id(&w)).collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED.len() || id == UNK_ID)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercased whitespace-separated words.
pub fn normalize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}
