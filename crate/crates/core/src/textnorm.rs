//! Transcript normalization for TTS input.
//!
//! Rules run in a fixed order: NFC composition, character replacement map,
//! period-run collapse, `!`/`?` run collapse, whitespace collapse and trim.
//! A transcript is accepted when at least `min_words` whitespace-delimited
//! tokens remain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, PartialEq)]
pub enum TextNormError {
    #[error("transcript is not valid UTF-8 (byte {0})")]
    InvalidEncoding(usize),
    #[error("invalid replacement map: {0}")]
    InvalidMap(String),
}

pub fn default_char_map() -> BTreeMap<char, String> {
    [
        ('ŋ', "ng"),
        ('Ŋ', "Ng"),
        ('\u{2018}', "'"),
        ('\u{2019}', "'"),
        ('\u{201C}', "\""),
        ('\u{201D}', "\""),
    ]
    .into_iter()
    .map(|(c, s)| (c, s.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextNormalizer {
    pub min_words: usize,
    char_map: BTreeMap<char, String>,
}

impl Default for TextNormalizer {
    fn default() -> Self {
        Self { min_words: 3, char_map: default_char_map() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationOutcome {
    pub normalized: String,
    pub accepted: bool,
    pub applied_rules: Vec<String>,
}

impl TextNormalizer {
    /// Replacement values may not reintroduce characters that are themselves mapped.
    pub fn new(min_words: usize, char_map: BTreeMap<char, String>) -> Result<Self, TextNormError> {
        for (from, to) in &char_map {
            if let Some(bad) = to.chars().find(|c| char_map.contains_key(c)) {
                return Err(TextNormError::InvalidMap(format!("replacement for '{from}' contains mapped character '{bad}'")));
            }
        }
        Ok(Self { min_words, char_map })
    }

    pub fn char_map(&self) -> &BTreeMap<char, String> {
        &self.char_map
    }

    pub fn normalize(&self, text: &str) -> NormalizationOutcome {
        let mut rules = Vec::new();
        let mut apply = |name: &str, before: String, f: &dyn Fn(&str) -> String| {
            let after = f(&before);
            if after != before {
                rules.push(name.to_string());
            }
            after
        };
        let s = apply("nfc", text.to_string(), &|s| s.nfc().collect());
        let s = apply("char-map", s, &|s| {
            let mut out = String::with_capacity(s.len());
            for c in s.chars() {
                match self.char_map.get(&c) {
                    Some(r) => out.push_str(r),
                    None => out.push(c),
                }
            }
            out
        });
        let s = apply("collapse-periods", s, &|s| collapse_runs(s, |c| c == '.'));
        let s = apply("collapse-exclamation-question", s, &|s| collapse_runs(s, |c| c == '!' || c == '?'));
        let s = apply("collapse-whitespace", s, &|s| s.split_whitespace().collect::<Vec<_>>().join(" "));
        let accepted = word_count(&s) >= self.min_words;
        NormalizationOutcome { normalized: s, accepted, applied_rules: rules }
    }

    pub fn normalize_bytes(&self, bytes: &[u8]) -> Result<NormalizationOutcome, TextNormError> {
        let text = std::str::from_utf8(bytes).map_err(|e| TextNormError::InvalidEncoding(e.valid_up_to()))?;
        Ok(self.normalize(text))
    }
}

/// Collapses runs of an identical character matching `pred` to one.
fn collapse_runs(s: &str, pred: impl Fn(char) -> bool) -> String {
    let mut out = String::with_capacity(s.len());
    let mut prev = None;
    for c in s.chars() {
        if pred(c) && prev == Some(c) {
            continue;
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

pub fn normalize(text: &str) -> NormalizationOutcome {
    TextNormalizer::default().normalize(text)
}

/// Number of whitespace-delimited tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
