//! Whitespace word tokenizer for the desk-scale backbone. Lowercases,
//! splits on whitespace, and falls back to `<unk>` for out-of-vocabulary
//! words. Pretrained checkpoints ship their own vocabulary in the same
//! format.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

const SPECIALS: usize = 4;

/// Fixed-capacity word vocabulary; ids 0..=3 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    capacity: usize,
}

/// Serialized form stored as `tokenizer.json` in a checkpoint directory.
#[derive(Serialize, Deserialize)]
pub struct TokenizerFile {
    pub kind: String,
    pub capacity: usize,
    pub words: Vec<String>,
}

impl WordTokenizer {
    /// Build a vocabulary of at most `capacity` ids (including the four
    /// specials) from the most frequent words in `texts`. Ties are broken
    /// lexicographically so the vocabulary is deterministic.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, capacity: usize) -> Result<Self> {
        if capacity <= SPECIALS {
            return Err(Error::config(format!(
                "vocab capacity {capacity} leaves no room for words beyond the {SPECIALS} specials"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in normalize_words(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(capacity - SPECIALS);
        let words: Vec<String> = ranked.into_iter().map(|(w, _)| w).collect();
        Ok(Self::from_words(words, capacity))
    }

    pub fn from_words(words: Vec<String>, capacity: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (i + SPECIALS) as u32))
            .collect();
        WordTokenizer { words, index, capacity }
    }

    /// Fixed id space size S; every id this tokenizer produces is below it.
    pub fn vocab_size(&self) -> usize {
        self.capacity
    }

    /// Ids actually assigned (specials plus fitted words).
    pub fn assigned_ids(&self) -> usize {
        SPECIALS + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Decode ids back to a string, skipping pad/bos/eos. Unknown or
    /// unassigned ids render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out: Vec<&str> = Vec::new();
        for &id in ids {
            match id {
                PAD_ID | BOS_ID | EOS_ID => continue,
                UNK_ID => out.push(UNK_TOKEN),
                _ => match self.words.get(id as usize - SPECIALS) {
                    Some(w) => out.push(w),
                    None => out.push(UNK_TOKEN),
                },
            }
        }
        out.join(" ")
    }

    pub fn to_file(&self) -> TokenizerFile {
        TokenizerFile {
            kind: "word-lowercase".to_string(),
            capacity: self.capacity,
            words: self.words.clone(),
        }
    }

    pub fn from_file(file: TokenizerFile) -> Result<Self> {
        if file.kind != "word-lowercase" {
            return Err(Error::checkpoint(format!(
                "tokenizer: unsupported kind '{}'",
                file.kind
            )));
        }
        if file.words.len() + SPECIALS > file.capacity {
            return Err(Error::checkpoint(format!(
                "tokenizer: {} words exceed capacity {}",
                file.words.len(),
                file.capacity
            )));
        }
        Ok(Self::from_words(file.words, file.capacity))
    }
}

fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}
