//! Conversation ingestion, filtering, vocabularies and batching.

mod batch;
mod vocab;

pub use batch::{encode_example, split_dataset, Batch, EncodedExample};
pub use vocab::{build_vocab, Side, Vocab, VocabBuild, RESERVED};

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// One raw conversation: turns of whitespace-free tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub turns: Vec<Vec<String>>,
}

/// A context of at least two utterances and the response that followed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
}

impl Example {
    /// The last turn is the response, everything before it the context.
    pub fn from_turns(mut turns: Vec<Vec<String>>) -> Result<Self> {
        if turns.len() < 3 {
            return Err(Error::ContextTooShort {
                found: turns.len().saturating_sub(1),
            });
        }
        let response = turns.pop().expect("nonempty");
        Ok(Self {
            context: turns,
            response,
        })
    }
}

/// Parses the raw text format: one conversation per line, TAB between turns,
/// spaces between tokens. Blank lines, empty turns and runs of spaces are
/// skipped.
pub fn parse_raw(bytes: &[u8]) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (n, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = core::str::from_utf8(line).map_err(|_| Error::Encoding { line: n + 1 })?;
        let turns: Vec<Vec<String>> = line
            .split('\t')
            .map(|t| t.split_whitespace().map(ToString::to_string).collect::<Vec<_>>())
            .filter(|t| !t.is_empty())
            .collect();
        if !turns.is_empty() {
            out.push(Conversation { turns });
        }
    }
    Ok(out)
}

/// Thresholds of the corpus filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    /// Conversations with fewer turns are dropped. Values below 3 act as 3,
    /// since a context needs two utterances besides the response.
    pub min_turns: usize,
    /// Conversations with any longer utterance are dropped.
    pub max_utterance_len: usize,
    /// Conversations whose response occurs more often than this are dropped.
    pub max_response_count: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_turns: 3,
            max_utterance_len: 50,
            max_response_count: 50,
        }
    }
}

/// Rejection counts per rule. A conversation breaking several rules counts
/// once under each of them and once in `rejected`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterTally {
    pub input: usize,
    pub kept: usize,
    pub rejected: usize,
    pub too_few_turns: usize,
    pub utterance_too_long: usize,
    pub frequent_response: usize,
}

/// Applies the three corpus rules. Response frequencies are counted on the
/// unfiltered input, so the rules commute.
pub fn filter_conversations(convs: &[Conversation], rules: &FilterRules) -> (Vec<Example>, FilterTally) {
    let mut freq: BTreeMap<&[String], usize> = BTreeMap::new();
    for c in convs {
        if let Some(last) = c.turns.last() {
            *freq.entry(last.as_slice()).or_default() += 1;
        }
    }
    let min_turns = rules.min_turns.max(3);
    let mut tally = FilterTally {
        input: convs.len(),
        ..FilterTally::default()
    };
    let mut kept = Vec::new();
    for c in convs {
        let short = c.turns.len() < min_turns;
        let long = c.turns.iter().any(|t| t.len() > rules.max_utterance_len);
        let frequent = c
            .turns
            .last()
            .is_some_and(|r| freq[r.as_slice()] > rules.max_response_count);
        tally.too_few_turns += short as usize;
        tally.utterance_too_long += long as usize;
        tally.frequent_response += frequent as usize;
        if short || long || frequent {
            tally.rejected += 1;
        } else {
            kept.push(Example::from_turns(c.turns.clone()).expect("at least three turns"));
        }
    }
    tally.kept = kept.len();
    (kept, tally)
}
