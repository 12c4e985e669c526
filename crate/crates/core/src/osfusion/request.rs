// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::{TokenId, Tokenizer};

pub const SUBJECT_PLACEHOLDER: &str = "{subject}";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodProbe {
    pub prompt: String,
    pub object: String,
}

/// One counterfactual edit `(prompt, original_object) -> (prompt, new_object)`
/// plus its evaluation probes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    #[serde(default)]
    pub id: String,
    pub subject: String,
    pub prompt: String,
    pub original_object: String,
    pub new_object: String,
    #[serde(default)]
    pub paraphrases: Vec<String>,
    #[serde(default)]
    pub neighborhood: Vec<NeighborhoodProbe>,
}

impl EditRequest {
    /// Substitutes the `{subject}` placeholder in prompt and paraphrases and
    /// checks the text-level invariants.
    pub fn normalized(mut self) -> Result<Self> {
        let reject = |reason: &str| Error::InvalidRequest {
            id: self.id.clone(),
            reason: reason.to_owned(),
        };
        if self.subject.split_whitespace().next().is_none() {
            return Err(reject("empty subject"));
        }
        if self.original_object.split_whitespace().next().is_none()
            || self.new_object.split_whitespace().next().is_none()
        {
            return Err(reject("empty object"));
        }
        if self.new_object.trim() == self.original_object.trim() {
            return Err(reject("new_object equals original_object"));
        }
        let fill = |s: &str| s.replace(SUBJECT_PLACEHOLDER, &self.subject);
        let prompt = fill(&self.prompt);
        if !contains_words(&prompt, &self.subject) {
            return Err(reject("prompt does not contain the subject"));
        }
        let paraphrases = self.paraphrases.iter().map(|p| fill(p)).collect();
        let neighborhood = self
            .neighborhood
            .iter()
            .map(|n| NeighborhoodProbe {
                prompt: fill(&n.prompt),
                object: n.object.clone(),
            })
            .collect();
        self.prompt = prompt;
        self.paraphrases = paraphrases;
        self.neighborhood = neighborhood;
        Ok(self)
    }
}

fn contains_words(text: &str, needle: &str) -> bool {
    let hay: Vec<&str> = text.split_whitespace().collect();
    let needle: Vec<&str> = needle.split_whitespace().collect();
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// First occurrence of `needle` as a contiguous run in `hay`.
pub fn find_span(hay: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Token-level view of a request against a specific vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedRequest {
    pub subject: Vec<TokenId>,
    /// `<bos>` followed by the prompt tokens.
    pub prompt: Vec<TokenId>,
    /// Position of the first subject token within `prompt`.
    pub subject_start: usize,
    pub original_object: Vec<TokenId>,
    pub new_object: Vec<TokenId>,
}

impl TokenizedRequest {
    pub fn new(request: &EditRequest, tokenizer: &Tokenizer) -> Result<Self> {
        let subject = tokenizer.encode(&request.subject)?;
        if subject.is_empty() {
            return Err(Error::Empty("subject tokens"));
        }
        let prompt = with_bos(tokenizer.encode(&request.prompt)?);
        let subject_start = find_span(&prompt, &subject).ok_or_else(|| Error::SubjectNotFound {
            subject: request.subject.clone(),
            prompt: request.prompt.clone(),
        })?;
        let original_object = tokenizer.encode(&request.original_object)?;
        let new_object = tokenizer.encode(&request.new_object)?;
        if original_object.is_empty() || new_object.is_empty() {
            return Err(Error::Empty("object tokens"));
        }
        Ok(Self {
            subject,
            prompt,
            subject_start,
            original_object,
            new_object,
        })
    }

    pub fn subject_span(&self) -> (usize, usize) {
        (self.subject_start, self.subject_start + self.subject.len())
    }
}

pub fn with_bos(mut ids: Vec<TokenId>) -> Vec<TokenId> {
    ids.insert(0, Tokenizer::BOS);
    ids
}

/// Result of reading a JSON Lines request file.
#[derive(Clone, Debug, Default)]
pub struct IngestedRequests {
    pub requests: Vec<EditRequest>,
    /// `(line number, reason)` for every line that was excluded.
    pub rejected: Vec<(usize, String)>,
}

/// Parses JSON Lines requests. Requests without an `id` get their 0-based
/// line index. Invalid requests are excluded and reported, malformed JSON is
/// an error.
pub fn parse_requests_jsonl(text: &str) -> Result<IngestedRequests> {
    let mut out = IngestedRequests::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut req: EditRequest = serde_json::from_str(line).map_err(|e| {
            Error::format("requests jsonl", format!("line {}: {e}", i + 1))
        })?;
        if req.id.is_empty() {
            req.id = i.to_string();
        }
        match req.normalized() {
            Ok(r) => out.requests.push(r),
            Err(e) => out.rejected.push((i + 1, e.to_string())),
        }
    }
    Ok(out)
}

pub fn read_requests_jsonl(path: &Path) -> Result<IngestedRequests> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_requests_jsonl(&text)
}

pub fn requests_to_jsonl(requests: &[EditRequest]) -> Result<String> {
    let mut out = String::new();
    for r in requests {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
