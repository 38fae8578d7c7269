//! Deterministic whitespace + punctuation tokenizer over a fixed vocabulary.
//!
//! Text splits into word tokens (`[A-Za-z0-9_'-]+`) and single punctuation
//! characters. Unknown surfaces map to `<unk>`; `<pad>` only ever appears in
//! batched training, never in user text.

use crate::error::{KbError, Result};
use std::collections::HashMap;

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Token ids plus the byte span each token covers in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\'' || c == '-'
}

/// Split text into (surface, byte_start, byte_end) pieces.
fn split_surfaces(text: &str) -> Vec<(&str, usize, usize)> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (pos, c) in text.char_indices() {
        if is_word_char(c) {
            if word_start.is_none() {
                word_start = Some(pos);
            }
        } else {
            if let Some(s) = word_start.take() {
                out.push((&text[s..pos], s, pos));
            }
            if !c.is_whitespace() {
                let end = pos + c.len_utf8();
                out.push((&text[pos..end], pos, end));
            }
        }
    }
    if let Some(s) = word_start {
        out.push((&text[s..], s, text.len()));
    }
    out
}

impl Tokenizer {
    /// Vocabulary in id order. `words[0]` and `words[1]` must be the
    /// `<unk>` / `<pad>` specials.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != UNK || words[1] != PAD {
            return Err(KbError::Tokenize(format!(
                "vocabulary must start with {UNK} and {PAD}"
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(KbError::Tokenize(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Build a vocabulary from content words, prepending the specials and
    /// dropping duplicates while preserving first-seen order.
    pub fn build(content_words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut words = vec![UNK.to_string(), PAD.to_string()];
        let mut seen: HashMap<String, ()> = HashMap::new();
        seen.insert(UNK.to_string(), ());
        seen.insert(PAD.to_string(), ());
        for w in content_words {
            if seen.insert(w.clone(), ()).is_none() {
                words.push(w);
            }
        }
        Self::from_words(words)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Result<Tokenized> {
        let pieces = split_surfaces(text);
        if pieces.is_empty() {
            return Err(KbError::Tokenize("empty input".into()));
        }
        let mut ids = Vec::with_capacity(pieces.len());
        let mut offsets = Vec::with_capacity(pieces.len());
        for (surface, start, end) in pieces {
            ids.push(self.index.get(surface).copied().unwrap_or(UNK_ID));
            offsets.push((start, end));
        }
        Ok(Tokenized { ids, offsets })
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.surface(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The canonical surface form tokenization round-trips to: token
    /// surfaces joined by single spaces.
    pub fn normalize(text: &str) -> String {
        split_surfaces(text)
            .iter()
            .map(|(s, _, _)| *s)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::build(["a", "b", "little", "cat", "."].map(String::from)).unwrap()
    }

    #[test]
    fn empty_input_rejected() {
        assert!(toy().encode("").is_err());
        assert!(toy().encode("   ").is_err());
    }

    #[test]
    fn whitespace_tokens_and_offsets() {
        let t = toy();
        let enc = t.encode("a a a").unwrap();
        assert_eq!(enc.ids.len(), 3);
        assert_eq!(enc.offsets, vec![(0, 1), (2, 3), (4, 5)]);
    }

    #[test]
    fn punctuation_splits() {
        let t = toy();
        let enc = t.encode("little cat.").unwrap();
        let surfaces: Vec<_> = enc
            .offsets
            .iter()
            .map(|&(s, e)| &"little cat."[s..e])
            .collect();
        assert_eq!(surfaces, vec!["little", "cat", "."]);
        assert_eq!(t.decode(&enc.ids), "little cat .");
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let t = toy();
        let enc = t.encode("little dog").unwrap();
        assert_eq!(enc.ids[1], UNK_ID);
    }

    #[test]
    fn round_trip_equals_normalize() {
        let t = toy();
        for text in ["a  b   little cat .", " cat a b ", "a.b"] {
            let enc = t.encode(text).unwrap();
            assert_eq!(t.decode(&enc.ids), Tokenizer::normalize(text));
        }
    }

    #[test]
    fn offsets_monotone() {
        let enc = toy().encode("a b . cat little").unwrap();
        for w in enc.offsets.windows(2) {
            assert!(w[0].1 <= w[1].0);
        }
    }

    #[test]
    fn duplicate_vocab_rejected() {
        assert!(Tokenizer::from_words(
            [UNK, PAD, "x", "x"].map(String::from).to_vec()
        )
        .is_err());
    }
}
