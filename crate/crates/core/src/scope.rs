//! Edit scope indicator: decides whether a prompt mentions an in-scope
//! entity, by exact substring search first and Levenshtein-based fuzzy
//! window matching second.

use crate::error::{KbError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.85;

/// One edit: the entity, its edit prompt and target, a rephrase, and the
/// related prompts whose behavior must not change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub subject: String,
    pub prompt: String,
    pub target: String,
    pub rephrase_prompt: String,
    #[serde(rename = "locality")]
    pub locality_prompts: Vec<String>,
}

impl EditRecord {
    pub fn validate(&self) -> Result<()> {
        if self.subject.trim().is_empty() {
            return Err(KbError::Validation("empty subject".into()));
        }
        if self.target.is_empty() {
            return Err(KbError::Validation(format!(
                "record {:?}: empty target",
                self.subject
            )));
        }
        for (field, text) in [("prompt", &self.prompt), ("rephrase_prompt", &self.rephrase_prompt)] {
            if !normalize(text).contains(&normalize(&self.subject)) {
                return Err(KbError::Validation(format!(
                    "record {:?}: subject missing from {field} {text:?}",
                    self.subject
                )));
            }
        }
        Ok(())
    }
}

/// Matched entity occurrence in a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub entity: String,
    pub char_start: usize,
    pub char_end: usize,
    /// Normalized similarity in [0,1]; 1.0 iff the match is exact.
    pub similarity: f64,
    pub exact: bool,
}

/// Standard edit distance with unit insert/delete/substitute costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Case-fold and collapse runs of whitespace to single spaces.
fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// `1 - levenshtein/max(len)` on normalized strings; two empty strings
/// count as identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    let a = normalize(a);
    let b = normalize(b);
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&a, &b) as f64 / max_len as f64
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\'' || c == '-'
}

/// Length-preserving ASCII case fold, so byte offsets survive.
fn fold(s: &str) -> String {
    s.chars().map(|c| c.to_ascii_lowercase()).collect()
}

/// Fuzzy-searchable set of all in-scope entities.
#[derive(Debug, Clone)]
pub struct ScopeIndex {
    records: Vec<EditRecord>,
    by_subject: HashMap<String, usize>,
    /// Record indices ordered by subject length descending (specific names
    /// like "New York City" win over contained ones like "York").
    by_length: Vec<usize>,
    threshold: f64,
}

impl ScopeIndex {
    pub fn build(records: Vec<EditRecord>) -> Result<Self> {
        Self::build_with_threshold(records, DEFAULT_FUZZY_THRESHOLD)
    }

    pub fn build_with_threshold(records: Vec<EditRecord>, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(KbError::InvalidArgument(format!(
                "fuzzy threshold {threshold} outside [0,1]"
            )));
        }
        let mut by_subject = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            let key = normalize(&r.subject);
            if by_subject.insert(key, i).is_some() {
                return Err(KbError::Validation(format!(
                    "duplicate subject {:?}",
                    r.subject
                )));
            }
        }
        let mut by_length: Vec<usize> = (0..records.len()).collect();
        by_length.sort_by_key(|&i| std::cmp::Reverse(records[i].subject.chars().count()));
        Ok(Self { records, by_subject, by_length, threshold })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn records(&self) -> &[EditRecord] {
        &self.records
    }

    pub fn record_for(&self, subject: &str) -> Option<&EditRecord> {
        self.by_subject.get(&normalize(subject)).map(|&i| &self.records[i])
    }

    /// All non-overlapping in-scope entity occurrences in `prompt`, exact
    /// matches first, then fuzzy windows at or above the threshold. Sorted by
    /// (exact desc, similarity desc, first occurrence).
    pub fn match_prompt(&self, prompt: &str) -> Vec<MatchResult> {
        if prompt.is_empty() || self.records.is_empty() {
            return Vec::new();
        }
        let folded = fold(prompt);
        let mut candidates: Vec<MatchResult> = Vec::new();

        // Exact phase: longest subjects first, word-boundary guarded.
        for &ri in &self.by_length {
            let subject = &self.records[ri].subject;
            let needle = fold(subject);
            for (pos, _) in folded.match_indices(&needle) {
                let end = pos + needle.len();
                let before_ok = pos == 0
                    || !prompt[..pos].chars().next_back().map(is_word_char).unwrap_or(false);
                let after_ok = end == prompt.len()
                    || !prompt[end..].chars().next().map(is_word_char).unwrap_or(false);
                if before_ok && after_ok {
                    candidates.push(MatchResult {
                        entity: subject.clone(),
                        char_start: pos,
                        char_end: end,
                        similarity: 1.0,
                        exact: true,
                    });
                }
            }
        }

        // Fuzzy phase: slide word windows sized around each subject's word
        // count, scoring normalized similarity.
        let words: Vec<(usize, usize)> = word_spans(prompt);
        for &ri in &self.by_length {
            let subject = &self.records[ri].subject;
            let n_words = subject.split_whitespace().count().max(1);
            let lo = n_words.saturating_sub(1).max(1);
            let hi = n_words + 1;
            for width in lo..=hi {
                if width > words.len() {
                    continue;
                }
                for start in 0..=(words.len() - width) {
                    let (cs, _) = words[start];
                    let (_, ce) = words[start + width - 1];
                    let window = &prompt[cs..ce];
                    let sim = similarity(window, subject);
                    if sim >= self.threshold {
                        candidates.push(MatchResult {
                            entity: subject.clone(),
                            char_start: cs,
                            char_end: ce,
                            similarity: sim,
                            exact: sim == 1.0,
                        });
                    }
                }
            }
        }

        // Precedence, then greedy non-overlap.
        candidates.sort_by(|a, b| {
            b.exact
                .cmp(&a.exact)
                .then(b.similarity.partial_cmp(&a.similarity).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.char_start.cmp(&b.char_start))
                .then((b.char_end - b.char_start).cmp(&(a.char_end - a.char_start)))
        });
        let mut accepted: Vec<MatchResult> = Vec::new();
        for c in candidates {
            let overlaps = accepted
                .iter()
                .any(|m| c.char_start < m.char_end && m.char_start < c.char_end);
            if !overlaps {
                accepted.push(c);
            }
        }
        accepted
    }
}

fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (pos, c) in text.char_indices() {
        if is_word_char(c) {
            if start.is_none() {
                start = Some(pos);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, pos));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}
