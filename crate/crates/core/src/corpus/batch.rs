use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Example, Vocab, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::ContextInput;
use crate::numerics::Rng;

/// Padded, masked ids of several examples. Padding sizes are per batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// `[B][M_max][T_max]`.
    pub context: Vec<Vec<Vec<usize>>>,
    pub word_mask: Vec<Vec<Vec<bool>>>,
    /// `[B][M_max]`.
    pub utterance_mask: Vec<Vec<bool>>,
    /// `[B][R_max]`, each real response followed by EOS.
    pub response: Vec<Vec<usize>>,
    pub response_mask: Vec<Vec<bool>>,
}

impl Batch {
    /// Maps tokens to ids (UNK when absent) and pads.
    pub fn encode(examples: &[Example], context_vocab: &Vocab, response_vocab: &Vocab) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("cannot encode an empty batch"));
        }
        let m_max = examples.iter().map(|e| e.context.len()).max().unwrap_or(0);
        let t_max = examples
            .iter()
            .flat_map(|e| e.context.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let r_max = examples.iter().map(|e| e.response.len() + 1).max().unwrap_or(1);

        let mut batch = Batch {
            context: Vec::with_capacity(examples.len()),
            word_mask: Vec::with_capacity(examples.len()),
            utterance_mask: Vec::with_capacity(examples.len()),
            response: Vec::with_capacity(examples.len()),
            response_mask: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            let mut ids = vec![vec![PAD; t_max]; m_max];
            let mut mask = vec![vec![false; t_max]; m_max];
            for (i, utt) in ex.context.iter().enumerate() {
                for (j, w) in utt.iter().enumerate() {
                    ids[i][j] = context_vocab.id(w);
                    mask[i][j] = true;
                }
            }
            batch.context.push(ids);
            batch.word_mask.push(mask);
            batch
                .utterance_mask
                .push((0..m_max).map(|i| i < ex.context.len()).collect());

            let mut resp = response_vocab.encode(&ex.response);
            resp.push(EOS);
            let n = resp.len();
            resp.resize(r_max, PAD);
            batch.response.push(resp);
            batch.response_mask.push((0..r_max).map(|k| k < n).collect());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    /// Model input and EOS-terminated target of example `b`, dropping padded
    /// utterances and response padding. Word padding stays, masked.
    pub fn example(&self, b: usize) -> EncodedExample {
        let keep = |i: &usize| self.utterance_mask[b][*i];
        let idx: Vec<usize> = (0..self.utterance_mask[b].len()).filter(keep).collect();
        let context = ContextInput {
            utterances: idx.iter().map(|&i| self.context[b][i].clone()).collect(),
            masks: idx.iter().map(|&i| self.word_mask[b][i].clone()).collect(),
        };
        let target = self.response[b]
            .iter()
            .zip(&self.response_mask[b])
            .filter(|(_, m)| **m)
            .map(|(id, _)| *id)
            .collect();
        EncodedExample { context, target }
    }

    pub fn examples(&self) -> Vec<EncodedExample> {
        (0..self.len()).map(|b| self.example(b)).collect()
    }

    /// Number of target tokens, EOS included.
    pub fn token_count(&self) -> usize {
        self.response_mask.iter().flatten().filter(|m| **m).count()
    }
}

/// Model input with its EOS-terminated target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub context: ContextInput,
    pub target: Vec<usize>,
}

/// Unpadded encoding of one example.
pub fn encode_example(ex: &Example, context_vocab: &Vocab, response_vocab: &Vocab) -> EncodedExample {
    let context = ContextInput::new(ex.context.iter().map(|u| context_vocab.encode(u)).collect());
    let mut target = response_vocab.encode(&ex.response);
    target.push(EOS);
    EncodedExample { context, target }
}

/// Shuffles and cuts into train, validation and test parts of sizes
/// `floor(n * f)`. When the fractions sum to one the test part takes the
/// remainder, so the parts always partition the input.
pub fn split_dataset<T>(mut items: Vec<T>, rng: &mut Rng, fractions: [f64; 3]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f > 0.0)) || sum > 1.0 + 1e-9 {
        return Err(Error::parameter(
            "split fractions must be positive and sum to at most 1",
        ));
    }
    rng.shuffle(&mut items);
    let n = items.len();
    let size = |f: f64| libm::floor(n as f64 * f + 1e-9) as usize;
    let n_train = size(fractions[0]).min(n);
    let n_valid = size(fractions[1]).min(n - n_train);
    let n_test = if (sum - 1.0).abs() <= 1e-9 {
        n - n_train - n_valid
    } else {
        size(fractions[2]).min(n - n_train - n_valid)
    };
    let mut rest = items.split_off(n_train);
    let mut test = rest.split_off(n_valid);
    test.truncate(n_test);
    Ok((items, rest, test))
}
