use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Example, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Which side of the examples a vocabulary is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Context,
    Response,
}

/// Token list with reserved ids 0..4 and an inverse map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds from a full token list, which must start with [`RESERVED`] and
    /// contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::contract("vocabulary must start with <pad>, <unk>, <bos>, <eos>"));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::contract(alloc::format!("invalid token at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(alloc::format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by `words`.
    pub fn with_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
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

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocabulary { id, size: self.len() })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Tokens of `ids` up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => out.push(self.token(id)?.to_string()),
            }
        }
        Ok(out)
    }
}

/// A vocabulary with the share of corpus tokens it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabBuild {
    pub vocab: Vocab,
    /// Occurrences of kept tokens divided by all occurrences.
    pub coverage: f64,
    pub total_occurrences: usize,
}

/// Keeps the `size` most frequent tokens of one side, ties broken
/// lexicographically. Literal reserved strings in the data are not counted.
pub fn build_vocab(examples: &[Example], side: Side, size: usize) -> Result<VocabBuild> {
    if size == 0 {
        return Err(Error::parameter("vocabulary size must be at least 1"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in examples {
        let utterances = match side {
            Side::Context => ex.context.as_slice(),
            Side::Response => core::slice::from_ref(&ex.response),
        };
        for w in utterances.iter().flatten() {
            if !RESERVED.contains(&w.as_str()) {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::contract("no tokens to build a vocabulary from"));
    }
    let total: usize = counts.values().sum();
    // BTreeMap iterates in lexicographic order and the sort is stable
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by_key(|&(_, c)| core::cmp::Reverse(c));
    ranked.truncate(size);
    let kept: usize = ranked.iter().map(|(_, c)| c).sum();
    Ok(VocabBuild {
        vocab: Vocab::with_words(ranked.into_iter().map(|(w, _)| w))?,
        coverage: kept as f64 / total as f64,
        total_occurrences: total,
    })
}
