//! Perplexity, a unigram baseline and the attention ablation suite.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EncodedExample};
use crate::error::{Error, Result};
use crate::model::{fingerprint_of, Ablation, ContextInput, Hran, ModelConfig};
use crate::numerics::math;
use crate::training::{fit, FitState, TrainSchedule};

/// Anything that assigns a teacher-forced negative log-likelihood to a target.
pub trait SequenceScorer {
    fn sequence_nll(&self, context: &ContextInput, target: &[usize]) -> Result<f64>;
    /// Short digest identifying the scorer's configuration.
    fn fingerprint(&self) -> String;
}

impl SequenceScorer for Hran {
    fn sequence_nll(&self, context: &ContextInput, target: &[usize]) -> Result<f64> {
        self.forward_nll(context, target)
    }

    fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }
}

/// What the perplexity average is taken over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Total response tokens, EOS included.
    #[default]
    Tokens,
    /// Number of examples.
    Examples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub total_nll: f64,
    pub total_tokens: usize,
    pub normalization: Normalization,
    pub per_example_nll: Vec<f64>,
    pub fingerprint: String,
}

impl EvalReport {
    /// `exp(sum of per-example NLL / N)`, summed in list order.
    pub fn recompute(per_example_nll: &[f64], tokens: usize, normalization: Normalization) -> f64 {
        let total: f64 = per_example_nll.iter().sum();
        let n = match normalization {
            Normalization::Tokens => tokens,
            Normalization::Examples => per_example_nll.len(),
        };
        math::exp(total / n as f64)
    }
}

/// Teacher-forced corpus perplexity.
pub fn perplexity<S: SequenceScorer + ?Sized>(
    scorer: &S,
    examples: &[EncodedExample],
    normalization: Normalization,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::contract("perplexity needs at least one example"));
    }
    let mut per_example_nll = Vec::with_capacity(examples.len());
    let mut total_tokens = 0;
    for (i, ex) in examples.iter().enumerate() {
        let nll = scorer
            .sequence_nll(&ex.context, &ex.target)
            .map_err(|e| e.in_example(i))?;
        if !nll.is_finite() {
            return Err(Error::Numeric {
                what: "example negative log-likelihood".into(),
                index: i,
            }
            .in_example(i));
        }
        per_example_nll.push(nll);
        total_tokens += ex.target.len();
    }
    let perplexity = EvalReport::recompute(&per_example_nll, total_tokens, normalization);
    Ok(EvalReport {
        perplexity,
        total_nll: per_example_nll.iter().sum(),
        total_tokens,
        normalization,
        per_example_nll,
        fingerprint: scorer.fingerprint(),
    })
}

/// Add-one smoothed unigram distribution over the response vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramBaseline {
    pub counts: Vec<usize>,
    pub total: usize,
    log_probs: Vec<f64>,
}

impl UnigramBaseline {
    /// Counts every target token (EOS included) of the training examples.
    pub fn fit(train: &[EncodedExample], vocab_size: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract("baseline needs training examples"));
        }
        let mut counts = vec![0usize; vocab_size];
        for ex in train {
            for &t in &ex.target {
                *counts.get_mut(t).ok_or(Error::Vocabulary {
                    id: t,
                    size: vocab_size,
                })? += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let denom = (total + vocab_size) as f64;
        let log_probs = counts.iter().map(|&c| math::ln((c + 1) as f64 / denom)).collect();
        Ok(Self {
            counts,
            total,
            log_probs,
        })
    }

    pub fn log_prob(&self, token: usize) -> f64 {
        self.log_probs[token]
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

impl SequenceScorer for UnigramBaseline {
    fn sequence_nll(&self, _context: &ContextInput, target: &[usize]) -> Result<f64> {
        target
            .iter()
            .map(|&t| {
                self.log_probs.get(t).map(|lp| -lp).ok_or(Error::Vocabulary {
                    id: t,
                    size: self.log_probs.len(),
                })
            })
            .sum()
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(&alloc::format!("unigram {:?}", self.counts))
    }
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub parameter_count: usize,
    pub perplexity: Option<f64>,
    pub epochs: usize,
    pub error: Option<String>,
}

/// Trains every attention variant from the same seed and data and reports
/// validation perplexity side by side. A failing variant is recorded and the
/// suite moves on.
pub fn run_ablation_suite(
    config: &ModelConfig,
    train: &[Batch],
    validation: &[EncodedExample],
    schedule: &TrainSchedule,
) -> Vec<AblationRow> {
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let cfg = ModelConfig {
                ablation,
                ..config.clone()
            };
            let mut row = AblationRow {
                ablation,
                parameter_count: cfg.parameter_count(),
                perplexity: None,
                epochs: 0,
                error: None,
            };
            let run = || -> Result<(f64, usize)> {
                let mut model = Hran::new(cfg.clone())?;
                let state = FitState::new(&model, schedule)?;
                let out = fit(&mut model, train, validation, schedule, state, &mut |_, _, _| Ok(()))?;
                let best = out.state.best.as_ref().map_or(f64::INFINITY, |b| b.perplexity);
                Ok((best, out.state.epoch))
            };
            match run() {
                Ok((ppl, epochs)) => {
                    row.perplexity = Some(ppl);
                    row.epochs = epochs;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}
