//! Fixed-vocabulary whitespace tokenizer.
//!
//! Ids 0..4 are the reserved specials (PAD, CLS, MASK, UNK). The vocabulary
//! file lists one token per line; a token on zero-based line `k` has id
//! `k + 4`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CLS_ID, NUM_SPECIAL_TOKENS, UNK_ID};

/// An ordered vocabulary of content tokens (specials excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid vocabulary token {t:?}")));
            }
            if !seen.insert(t.clone()) {
                return Err(Error::config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens })
    }

    /// Tokens ranked by corpus frequency (ties broken lexicographically),
    /// truncated to `budget` content slots.
    pub fn from_texts<'a>(texts: impl Iterator<Item = &'a str>, budget: usize) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                *counts.entry(word.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(budget);
        Self::new(ranked.into_iter().map(|(t, _)| t).collect())
    }

    /// Total id space including the 4 specials.
    pub fn total_size(&self) -> usize {
        self.tokens.len() + NUM_SPECIAL_TOKENS as usize
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::missing(format!("vocabulary {}: {e}", path.display())))?;
        Self::new(raw.lines().map(str::to_string).collect())
    }
}

/// Lowercasing whitespace tokenizer over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    ids: HashMap<String, u32>,
    max_seq_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, max_seq_len: usize) -> Self {
        let ids = vocab
            .content_tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + NUM_SPECIAL_TOKENS))
            .collect();
        Self {
            vocab,
            ids,
            max_seq_len,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.total_size()
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    /// Id for a (lowercased) token, or None if out of vocabulary.
    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(&token.to_lowercase()).copied()
    }

    /// Token string for an id; specials render as bracketed names.
    pub fn token_of(&self, id: u32) -> &str {
        match id {
            0 => "[pad]",
            1 => "[cls]",
            2 => "[mask]",
            3 => "[unk]",
            _ => self
                .vocab
                .content_tokens()
                .get((id - NUM_SPECIAL_TOKENS) as usize)
                .map(String::as_str)
                .unwrap_or("[bad-id]"),
        }
    }

    /// CLS + lowercased whitespace lookup with UNK fallback, truncated to
    /// `max_seq_len` total positions.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut tokens = vec![CLS_ID];
        for word in text.split_whitespace() {
            if tokens.len() >= self.max_seq_len {
                break;
            }
            tokens.push(self.id_of(word).unwrap_or(UNK_ID));
        }
        tokens
    }
}
