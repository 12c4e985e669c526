// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";

/// Whitespace word-level tokenizer over a fixed vocabulary.
///
/// Ids `0` and `1` are the pad and beginning-of-sequence tokens; the rest are
/// the corpus words in sorted order, so ids depend only on the word set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;

    /// Builds the vocabulary from every whitespace-separated word in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| *w != PAD_TOKEN && *w != BOS_TOKEN)
            .collect();
        let tokens = [PAD_TOKEN, BOS_TOKEN]
            .into_iter()
            .chain(words)
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(BOS_TOKEN)
        {
            return Err(Error::format("vocab", "first two tokens must be <pad> and <bos>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format("vocab", format!("bad token {t:?} on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::format("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Parses the vocab file format: one token per line, line number = id.
    pub fn from_vocab_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn to_vocab_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_vocab_text(&text)
    }

    /// Hex SHA-256 of the vocab file contents.
    pub fn vocab_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_vocab_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::OutOfVocab(w.to_owned())))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or(Error::TokenOutOfRange {
                    id: id as usize,
                    vocab_size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}
