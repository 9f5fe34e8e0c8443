// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace vocabulary for the synthetic triage language.
//!
//! Layout: four control tokens, the response words, two marker tokens per
//! hazard category (`kNNa kNNb`, always adjacent), then filler words
//! `wNNN`. The system prompt and the safety suffix each encode to a single
//! control token.

use std::collections::HashMap;

use super::prompt::{SAFETY_SUFFIX, SECTION_SEP, SYSTEM_PROMPT};
use crate::error::{Result, SteerError};

pub const SYS_TOKEN: &str = "<sys>";
pub const SAFETY_TOKEN: &str = "<safety>";
pub const RESP_TOKEN: &str = "<resp>";
pub const EOS_TOKEN: &str = "<eos>";

/// Words the model may emit. Includes the logit-lens hazard words.
pub const RESPONSE_WORDS: [&str; 14] = [
    "call",
    "911",
    "now",
    "seek",
    "emergency",
    "care",
    "urgent",
    "today",
    "routine",
    "follow-up",
    "reassure",
    "ambulance",
    "danger",
    "hospital",
];

/// Hazard-associated tokens tracked by the logit lens.
pub const LENS_HAZARD_WORDS: [&str; 6] = ["911", "emergency", "ambulance", "urgent", "danger", "hospital"];

/// Keyword-bearing responses taught for hazards. Which one a case gets is
/// drawn per case, independent of its text.
pub const HAZARD_RESPONSES: [&[&str]; 3] = [
    &["call", "911", "now"],
    &["seek", "emergency", "care"],
    &["urgent", "care", "today"],
];

/// Reassurance taught for benign cases; matches no keyword.
pub const BENIGN_RESPONSE: &[&str] = &["routine", "follow-up", "reassure"];

const FIXED_TOKENS: usize = 4 + RESPONSE_WORDS.len();
/// Fewest filler words a vocabulary may have.
pub const MIN_FILLERS: usize = 8;

pub fn marker_pair(category: usize) -> (String, String) {
    (format!("k{category:02}a"), format!("k{category:02}b"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    n_categories: usize,
}

impl Vocabulary {
    /// Builds the vocabulary for `n_categories` hazard categories with
    /// `size` tokens in total.
    pub fn new(size: usize, n_categories: usize) -> Result<Self> {
        let fixed = FIXED_TOKENS + 2 * n_categories;
        if size < fixed + MIN_FILLERS {
            return Err(SteerError::Config(format!(
                "vocabulary of {size} tokens cannot hold {fixed} fixed tokens plus {MIN_FILLERS} fillers"
            )));
        }
        let mut tokens: Vec<String> = [SYS_TOKEN, SAFETY_TOKEN, RESP_TOKEN, EOS_TOKEN]
            .iter()
            .chain(RESPONSE_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        for c in 0..n_categories {
            let (a, b) = marker_pair(c);
            tokens.push(a);
            tokens.push(b);
        }
        for f in 0..size - fixed {
            tokens.push(format!("w{f:03}"));
        }
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(SteerError::Config(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(SteerError::Config(format!("duplicate token {t:?}")));
            }
        }
        for required in [SYS_TOKEN, SAFETY_TOKEN, RESP_TOKEN, EOS_TOKEN]
            .iter()
            .chain(RESPONSE_WORDS.iter())
        {
            if !index.contains_key(*required) {
                return Err(SteerError::Config(format!("vocabulary lacks token {required:?}")));
            }
        }
        let n_categories = (0..).take_while(|&c| index.contains_key(&marker_pair(c).0)).count();
        Ok(Self {
            tokens,
            index,
            n_categories,
        })
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

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn required(&self, token: &str) -> u32 {
        self.index[token]
    }

    pub fn resp_id(&self) -> u32 {
        self.required(RESP_TOKEN)
    }

    pub fn eos_id(&self) -> u32 {
        self.required(EOS_TOKEN)
    }

    pub fn fillers(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .filter(|t| t.starts_with('w') && t[1..].chars().all(|c| c.is_ascii_digit()))
            .map(String::as_str)
            .collect()
    }

    pub fn hazard_token_ids(&self) -> Vec<u32> {
        LENS_HAZARD_WORDS.iter().map(|w| self.required(w)).collect()
    }

    pub fn encode_words(&self, words: &[&str]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| SteerError::Input(format!("unknown token {w:?}")))
            })
            .collect()
    }

    /// Encodes a prompt from [`super::build_prompt`] and appends the
    /// response marker.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        let mut body = prompt;
        if let Some(rest) = body.strip_prefix(SYSTEM_PROMPT) {
            ids.push(self.required(SYS_TOKEN));
            body = rest.strip_prefix(SECTION_SEP).unwrap_or(rest);
        }
        let mut tail = None;
        if let Some(rest) = body.strip_suffix(SAFETY_SUFFIX) {
            tail = Some(self.required(SAFETY_TOKEN));
            body = rest.strip_suffix(SECTION_SEP).unwrap_or(rest);
        }
        for word in body.split_whitespace() {
            ids.push(
                self.id(word)
                    .ok_or_else(|| SteerError::Input(format!("unknown token {word:?}")))?,
            );
        }
        ids.extend(tail);
        ids.push(self.resp_id());
        Ok(ids)
    }

    /// Joins tokens with spaces, stopping before the first end-of-sequence.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let eos = self.eos_id();
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids.iter().take_while(|&&id| id != eos) {
            let token = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| SteerError::Input(format!("unknown token id {id}")))?;
            words.push(token.as_str());
        }
        Ok(words.join(" "))
    }

    /// Number of adjacent marker pairs in `text`, the salience of a hazard case.
    pub fn marker_count(&self, text: &str) -> usize {
        let words: Vec<&str> = text.split_whitespace().collect();
        words
            .windows(2)
            .filter(|w| {
                (0..self.n_categories).any(|c| {
                    let (a, b) = marker_pair(c);
                    w[0] == a && w[1] == b
                })
            })
            .count()
    }

    /// Whether any marker token appears in `text`.
    pub fn has_marker(&self, text: &str) -> bool {
        text.split_whitespace().any(|w| {
            w.len() == 4 && w.starts_with('k') && (w.ends_with('a') || w.ends_with('b')) && self.index.contains_key(w)
        })
    }
}
