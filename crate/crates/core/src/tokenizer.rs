//! Word-level tokenizer over a corpus-built vocabulary.
//!
//! Text is lowercased and split into alphanumeric runs; every other
//! non-whitespace character is a token of its own. Unknown words map to
//! `UNK`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const IMG: u32 = 4;
pub const STOP: u32 = 5;

pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<image>", "<stop>"];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading non-PAD tokens.
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&t| t == PAD).unwrap_or(self.ids.len())
    }

    pub fn with_eos(mut self) -> Self {
        self.ids.push(EOS);
        self
    }

    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD);
        }
        self
    }

    /// PAD may only appear as a suffix.
    pub fn pad_is_suffix(&self) -> bool {
        let n = self.content_len();
        self.ids[n..].iter().all(|&t| t == PAD)
    }
}

/// Split text into canonical lowercase tokens.
pub fn canonical_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(core::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Tokens joined by single spaces: the form `detokenize` reproduces.
pub fn canonicalize(text: &str) -> String {
    canonical_tokens(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Specials first, then the distinct canonical tokens of the corpus in
    /// sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for text in corpus {
            for t in canonical_tokens(text) {
                set.insert(t);
            }
        }
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        TokenSeq::new(
            canonical_tokens(text)
                .iter()
                .map(|t| self.id(t).unwrap_or(UNK))
                .collect(),
        )
    }

    /// Inverse of `tokenize` for in-vocabulary text. PAD, BOS and EOS are
    /// dropped; other specials render as their bracketed names.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        let mut parts: Vec<&str> = Vec::new();
        for &id in &seq.ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            parts.push(self.word(id).unwrap_or("<unk>"));
        }
        parts.join(" ")
    }
}
