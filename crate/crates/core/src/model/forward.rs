//! The network's forward computation on a [`Graph`].

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{Ablation, ModelConfig};
use super::params::ModelVars;
use crate::corpus::BOS;
use crate::error::{Error, Result};
use crate::layers::{bigru_encode, embed_lookup, gru_step, mlp_project, mlp_readout};
use crate::numerics::{Graph, Tensor, Var};

/// Token ids of a context, one row per utterance, with word masks. Masked
/// positions are padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextInput {
    pub utterances: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
}

impl ContextInput {
    /// Unpadded context: every position is real.
    pub fn new(utterances: Vec<Vec<usize>>) -> Self {
        let masks = utterances.iter().map(|u| vec![true; u.len()]).collect();
        Self { utterances, masks }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances.len() < 2 {
            return Err(Error::ContextTooShort {
                found: self.utterances.len(),
            });
        }
        if self.masks.len() != self.utterances.len() {
            return Err(Error::dimension(
                "context masks",
                &[self.utterances.len()],
                &[self.masks.len()],
            ));
        }
        for (i, (u, m)) in self.utterances.iter().zip(&self.masks).enumerate() {
            if u.len() != m.len() {
                return Err(Error::dimension("utterance mask", &[u.len()], &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::contract(alloc::format!("utterance {i} is empty")));
            }
        }
        Ok(())
    }
}

/// Word-level hidden sequences of every utterance.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    /// `hidden[i][j]` is `h_{i,j}`, `2 * word_hidden` wide.
    pub hidden: Vec<Vec<Var>>,
    pub masks: Vec<Vec<bool>>,
    /// Word-scorer projection of each `h_{i,j}`; it does not depend on the
    /// decode step, so it is computed once.
    projected: Vec<Vec<Option<Var>>>,
}

impl EncodedContext {
    pub fn utterance_count(&self) -> usize {
        self.hidden.len()
    }
}

/// Attention weights of one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// `alpha[i][j]`: weight of word `j` in utterance `i` (0 at padding).
    pub alpha: Vec<Vec<f64>>,
    /// `beta[i]`: weight of utterance `i`.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub steps: Vec<StepTrace>,
}

/// Result of one attention sweep.
#[derive(Debug, Clone)]
pub struct AttendOutput {
    /// Context vector `c_t`.
    pub context: Var,
    /// `l_{i,t}` for `i = 1..m` (index 0 is the earliest utterance).
    pub l_states: Vec<Var>,
    /// Utterance vectors `r_{i,t}`.
    pub pooled: Vec<Var>,
    pub trace: StepTrace,
}

/// Forward pass bound to a graph and a set of parameter vars.
pub struct Forward<'a> {
    pub config: &'a ModelConfig,
    pub g: &'a mut Graph,
    pub vars: &'a ModelVars,
}

impl<'a> Forward<'a> {
    pub fn new(config: &'a ModelConfig, g: &'a mut Graph, vars: &'a ModelVars) -> Self {
        Self { config, g, vars }
    }

    /// Bidirectional encoding of each utterance with shared word-level weights.
    pub fn encode_words(&mut self, context: &ContextInput) -> Result<EncodedContext> {
        context.validate()?;
        let v = self.vars;
        let h_slot = v.word_scorer.projections.len() - 1;
        let mut hidden = Vec::with_capacity(context.len());
        let mut projected = Vec::with_capacity(context.len());
        for (ids, mask) in context.utterances.iter().zip(&context.masks) {
            let hs = bigru_encode(
                self.g,
                &v.word_fwd,
                &v.word_bwd,
                v.context_embedding,
                ids,
                mask,
                v.h0_fwd,
                v.h0_bwd,
            )?;
            let proj = if self.config.ablation == Ablation::NoWordAtt {
                vec![None; hs.len()]
            } else {
                hs.iter()
                    .zip(mask)
                    .map(|(&h, &real)| real.then(|| mlp_project(self.g, &v.word_scorer, h_slot, h)).transpose())
                    .collect::<Result<Vec<_>>>()?
            };
            hidden.push(hs);
            projected.push(proj);
        }
        Ok(EncodedContext {
            hidden,
            masks: context.masks.clone(),
            projected,
        })
    }

    /// Interleaved word attention and backward utterance encoding, from the
    /// last utterance to the first, followed by utterance attention.
    pub fn attend_step(&mut self, enc: &EncodedContext, s_prev: Var) -> Result<AttendOutput> {
        let s_shape = self.g.value(s_prev).shape();
        if s_shape != [self.config.decoder_hidden] {
            return Err(Error::dimension(
                "attend_step decoder state",
                s_shape,
                &[self.config.decoder_hidden],
            ));
        }
        let v = self.vars;
        let ablation = self.config.ablation;
        let m = enc.utterance_count();
        let word_s = if ablation == Ablation::NoWordAtt {
            None
        } else {
            Some(mlp_project(self.g, &v.word_scorer, 0, s_prev)?)
        };

        let mut l_states = vec![v.l_init; m];
        let mut pooled = vec![v.l_init; m];
        let mut alphas = vec![Vec::new(); m];
        let mut l_next = v.l_init;
        for i in (0..m).rev() {
            let mask = &enc.masks[i];
            let alpha = match word_s {
                None => {
                    let weights = uniform_over(mask);
                    self.g.leaf(Tensor::vector(weights))
                }
                Some(ps) => {
                    let base = if ablation == Ablation::NoUdAtt {
                        ps
                    } else {
                        let pl = mlp_project(self.g, &v.word_scorer, 1, l_next)?;
                        self.g.add(ps, pl)?
                    };
                    let mut scores = Vec::with_capacity(mask.len());
                    let mut filler = None;
                    for proj in &enc.projected[i] {
                        let score = match proj {
                            Some(ph) => mlp_readout(self.g, &v.word_scorer, &[base, *ph])?,
                            None => *filler.get_or_insert_with(|| self.g.leaf(Tensor::scalar(0.0))),
                        };
                        scores.push(score);
                    }
                    let stacked = self.g.stack(&scores)?;
                    self.g.masked_softmax(stacked, mask)?
                }
            };
            alphas[i] = self.g.value(alpha).data().to_vec();
            let r = self.g.weighted_sum(alpha, &enc.hidden[i])?;
            let l = gru_step(self.g, &v.utterance_gru, r, l_next)?;
            pooled[i] = r;
            l_states[i] = l;
            l_next = l;
        }

        let beta = if ablation == Ablation::NoUttAtt {
            self.g.leaf(Tensor::vector(vec![1.0 / m as f64; m]))
        } else {
            let us = mlp_project(self.g, &v.utterance_scorer, 0, s_prev)?;
            let mut scores = Vec::with_capacity(m);
            for &l in &l_states {
                let ul = mlp_project(self.g, &v.utterance_scorer, 1, l)?;
                scores.push(mlp_readout(self.g, &v.utterance_scorer, &[us, ul])?);
            }
            let stacked = self.g.stack(&scores)?;
            self.g.masked_softmax(stacked, &vec![true; m])?
        };
        let context = self.g.weighted_sum(beta, &l_states)?;
        Ok(AttendOutput {
            context,
            l_states,
            pooled,
            trace: StepTrace {
                alpha: alphas,
                beta: self.g.value(beta).data().to_vec(),
            },
        })
    }

    /// Decoder transition and output distribution:
    /// `s_t = GRU(concat(e_{y_{t-1}}, c_t), s_{t-1})`,
    /// `log p = log softmax(W_o · concat(s_t, e_{y_{t-1}}))`.
    pub fn decode_step(&mut self, y_prev: usize, s_prev: Var, context: Var) -> Result<(Var, Var)> {
        let v = self.vars;
        let e = embed_lookup(self.g, v.response_embedding, y_prev)?;
        let x = self.g.concat(e, context, 0)?;
        let s = gru_step(self.g, &v.decoder, x, s_prev)?;
        let features = self.g.concat(s, e, 0)?;
        let logits = self.g.matmul(v.output_projection, features)?;
        let n = self.g.value(logits).numel();
        let log_probs = self.g.masked_log_softmax(logits, &vec![true; n])?;
        Ok((s, log_probs))
    }

    /// Zero decoder state `s_0`.
    pub fn initial_state(&mut self) -> Var {
        self.g.leaf(Tensor::zeros(&[self.config.decoder_hidden]))
    }

    /// Teacher-forced negative log-likelihood of `target` (which should end
    /// with EOS) given `context`. Returns the scalar loss node and, if
    /// requested, the attention trace.
    pub fn nll(
        &mut self,
        context: &ContextInput,
        target: &[usize],
        record: bool,
    ) -> Result<(Var, Option<AttentionTrace>)> {
        if target.is_empty() {
            return Err(Error::contract("response must be nonempty"));
        }
        let enc = self.encode_words(context)?;
        let mut s = self.initial_state();
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(target.len());
        let mut trace = record.then(AttentionTrace::default);
        for &y in target {
            let att = self.attend_step(&enc, s)?;
            let (s_next, log_probs) = self.decode_step(prev, s, att.context)?;
            terms.push(self.g.pick(log_probs, y).map_err(|_| Error::Vocabulary {
                id: y,
                size: self.config.response_vocab_size,
            })?);
            if let Some(t) = trace.as_mut() {
                t.steps.push(att.trace);
            }
            s = s_next;
            prev = y;
        }
        let stacked = self.g.stack(&terms)?;
        let total = self.g.sum(stacked);
        Ok((self.g.scale(total, -1.0), trace))
    }
}

/// Uniform weights over the unmasked positions.
pub fn uniform_over(mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|&&b| b).count() as f64;
    mask.iter().map(|&b| if b { 1.0 / n } else { 0.0 }).collect()
}
