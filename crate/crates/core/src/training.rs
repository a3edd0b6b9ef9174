//! AdaDelta, gradient clipping, the validation-driven schedule and `fit`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EncodedExample};
use crate::error::{Error, Result};
use crate::evaluation::{perplexity, Normalization};
use crate::model::{Hran, ModelParams, Precision};
use crate::numerics::{math, Rng, Tensor};

/// Per-parameter AdaDelta accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDelta {
    /// Running average of squared gradients, one tensor per parameter.
    pub mean_sq_grad: Vec<Tensor>,
    /// Running average of squared updates.
    pub mean_sq_delta: Vec<Tensor>,
    pub rho: f64,
    pub epsilon: f64,
    /// Multiplier on the applied step. The accumulators track the unscaled
    /// step, so `lr` does not feed back into the adaptive rates.
    pub lr: f64,
}

impl AdaDelta {
    pub fn new(params: &ModelParams, rho: f64, epsilon: f64, lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || !(epsilon > 0.0) || !(lr >= 0.0) {
            return Err(Error::parameter("AdaDelta needs 0 <= rho < 1, epsilon > 0, lr >= 0"));
        }
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            mean_sq_grad: zeros.clone(),
            mean_sq_delta: zeros,
            rho,
            epsilon,
            lr,
        })
    }

    /// One update of `params` by `grads`. `names` label errors.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, names: &[String]) -> Result<()> {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if grads.len() != params.len() || params.len() != self.mean_sq_grad.len() {
            return Err(Error::Compatibility(
                "optimizer state does not match the parameters".into(),
            ));
        }
        // validate everything first so a bad gradient leaves no partial update
        for (k, g) in grads.iter().enumerate() {
            if let Some(i) = g.first_non_finite() {
                return Err(Error::Numeric {
                    what: format!("gradient of {}", names.get(k).map_or("?", String::as_str)),
                    index: i,
                });
            }
            if g.shape() != params[k].shape() || g.shape() != self.mean_sq_grad[k].shape() {
                return Err(Error::dimension("adadelta", params[k].shape(), g.shape()));
            }
        }
        let (rho, eps, lr) = (self.rho, self.epsilon, self.lr);
        for (k, g) in grads.iter().enumerate() {
            let p = params[k].data_mut();
            let eg = self.mean_sq_grad[k].data_mut();
            let ed = self.mean_sq_delta[k].data_mut();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                let dx = -(math::sqrt(ed[i] + eps) / math::sqrt(eg[i] + eps)) * gi;
                ed[i] = rho * ed[i] + (1.0 - rho) * dx * dx;
                p[i] += lr * dx;
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient tensor.
pub fn global_norm(grads: &ModelParams) -> f64 {
    math::sqrt(grads.tensors().iter().map(|t| t.sum_squares()).sum())
}

/// Rescales `grads` so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in grads.tensors_mut() {
            t.scale(factor);
        }
    }
    norm
}

/// How "perplexity stopped decreasing" is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Improvement over the best perplexity seen so far.
    #[default]
    BestSoFar,
    /// Improvement over the previous epoch.
    Consecutive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub halve_on_increase: bool,
    /// Improvements smaller than this count as a stall.
    pub stop_threshold: f64,
    /// Stalls tolerated before stopping.
    pub patience: usize,
    pub stop_rule: StopRule,
    pub max_epochs: usize,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub rho: f64,
    pub epsilon: f64,
    /// Seed of the per-epoch batch shuffles.
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            batch_size: 128,
            initial_lr: 1.0,
            halve_on_increase: true,
            stop_threshold: 2.0,
            patience: 5,
            stop_rule: StopRule::BestSoFar,
            max_epochs: 100,
            clip_norm: Some(5.0),
            rho: 0.95,
            epsilon: 1e-6,
            seed: 0,
            normalization: Normalization::Tokens,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::parameter("batch size, patience and max epochs must be positive"));
        }
        if !(self.stop_threshold > 0.0) || !(self.initial_lr > 0.0) {
            return Err(Error::parameter("stop threshold and initial lr must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::parameter("clip norm must be positive"));
        }
        Ok(())
    }
}

/// Learning-rate halving and early stopping driven by validation perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTracker {
    pub lr: f64,
    pub best: Option<f64>,
    pub previous: Option<f64>,
    /// Epochs whose improvement fell short of the threshold since the last
    /// sufficient one.
    pub stalls: usize,
    pub halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub halved: bool,
    pub stop: bool,
    pub new_best: bool,
}

impl ScheduleTracker {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: None,
            previous: None,
            stalls: 0,
            halvings: 0,
        }
    }

    /// Feeds one epoch's validation perplexity.
    pub fn observe(&mut self, ppl: f64, schedule: &TrainSchedule) -> Result<Observation> {
        if ppl.is_nan() {
            return Err(Error::Numeric {
                what: "validation perplexity".into(),
                index: 0,
            });
        }
        let halved = schedule.halve_on_increase && self.previous.is_some_and(|p| ppl > p);
        if halved {
            self.lr *= 0.5;
            self.halvings += 1;
        }
        let reference = match schedule.stop_rule {
            StopRule::BestSoFar => self.best,
            StopRule::Consecutive => self.previous,
        };
        if let Some(r) = reference {
            if r - ppl < schedule.stop_threshold {
                self.stalls += 1;
            } else {
                self.stalls = 0;
            }
        }
        let new_best = self.best.is_none_or(|b| ppl < b);
        if new_best {
            self.best = Some(ppl);
        }
        self.previous = Some(ppl);
        Ok(Observation {
            halved,
            stop: self.stalls >= schedule.patience,
            new_best,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub total_loss: f64,
    pub tokens: usize,
    /// Largest pre-clip gradient norm over the epoch's batches.
    pub max_grad_norm: f64,
}

impl EpochStats {
    pub fn loss_per_token(&self) -> f64 {
        self.total_loss / self.tokens as f64
    }
}

fn add_into(acc: &mut ModelParams, g: &ModelParams) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Summed loss and gradients of a batch, examples taken in order.
pub fn batch_gradients(model: &Hran, batch: &Batch) -> Result<(f64, usize, ModelParams)> {
    let mut grads = ModelParams::zeros(&model.config)?;
    let mut loss = 0.0;
    let mut tokens = 0;
    for ex in batch.examples() {
        let lg = model.loss_and_gradients(&ex.context, &ex.target)?;
        loss += lg.loss;
        tokens += lg.tokens;
        add_into(&mut grads, &lg.gradients);
    }
    Ok((loss, tokens, grads))
}

/// Gradient step on one batch: summed gradients divided by the token count,
/// optional clipping, then the optimizer update. Returns the batch loss
/// (before the update), its token count and the pre-clip gradient norm.
pub fn train_batch(
    model: &mut Hran,
    optimizer: &mut AdaDelta,
    batch: &Batch,
    clip_norm: Option<f64>,
    names: &[String],
) -> Result<(f64, usize, f64)> {
    let (loss, tokens, mut grads) = batch_gradients(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            what: "training loss".into(),
            index: 0,
        });
    }
    let inv = 1.0 / tokens as f64;
    for t in grads.tensors_mut() {
        t.scale(inv);
    }
    let norm = match clip_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => global_norm(&grads),
    };
    optimizer.update(&mut model.params, &grads, names)?;
    if model.config.precision == Precision::F32 {
        model.params.round_to_f32();
    }
    Ok((loss, tokens, norm))
}

/// One pass over `batches` in an order drawn from `rng`. The loss of each
/// batch is measured before its update.
pub fn train_epoch(
    model: &mut Hran,
    optimizer: &mut AdaDelta,
    batches: &[Batch],
    rng: &mut Rng,
    clip_norm: Option<f64>,
) -> Result<EpochStats> {
    if batches.is_empty() {
        return Err(Error::contract("an epoch needs at least one batch"));
    }
    let mut order: Vec<usize> = (0..batches.len()).collect();
    rng.shuffle(&mut order);
    let names = ModelParams::names(&model.config);
    let mut stats = EpochStats {
        total_loss: 0.0,
        tokens: 0,
        max_grad_norm: 0.0,
    };
    for &b in &order {
        let (loss, tokens, norm) =
            train_batch(model, optimizer, &batches[b], clip_norm, &names).map_err(|e| e.in_batch(b))?;
        stats.total_loss += loss;
        stats.tokens += tokens;
        stats.max_grad_norm = stats.max_grad_norm.max(norm);
    }
    Ok(stats)
}

/// Why training ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_tokens: usize,
    pub valid_ppl: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub lr_halved: bool,
    pub stalls: usize,
    pub best_ppl: f64,
    pub new_best: bool,
    pub max_grad_norm: f64,
    pub clip_norm: Option<f64>,
}

/// Parameters of the best validation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub perplexity: f64,
    pub params: ModelParams,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: AdaDelta,
    pub tracker: ScheduleTracker,
    pub best: Option<BestSnapshot>,
    pub records: Vec<EpochRecord>,
    pub stopped: Option<StopReason>,
}

impl FitState {
    pub fn new(model: &Hran, schedule: &TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            epoch: 0,
            optimizer: AdaDelta::new(&model.params, schedule.rho, schedule.epsilon, schedule.initial_lr)?,
            tracker: ScheduleTracker::new(schedule.initial_lr),
            best: None,
            records: Vec::new(),
            stopped: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub state: FitState,
    pub stop_reason: StopReason,
}

/// Callback run after every epoch with the updated model, state and record.
pub type EpochHook<'a> = dyn FnMut(&Hran, &FitState, &EpochRecord) -> Result<()> + 'a;

/// Trains until early stopping or `max_epochs`, continuing from `state`.
/// Batch order of epoch `e` depends only on `(schedule.seed, e)`, so a run
/// resumed from a saved state reproduces the uninterrupted one.
pub fn fit(
    model: &mut Hran,
    train: &[Batch],
    validation: &[EncodedExample],
    schedule: &TrainSchedule,
    mut state: FitState,
    on_epoch: &mut EpochHook<'_>,
) -> Result<FitOutcome> {
    schedule.validate()?;
    if train.iter().all(Batch::is_empty) || validation.is_empty() {
        return Err(Error::contract("training and validation sets must be nonempty"));
    }
    // early stopping is final; a length cap is re-read from `schedule`
    if state.stopped == Some(StopReason::EarlyStop) {
        return Ok(FitOutcome {
            state,
            stop_reason: StopReason::EarlyStop,
        });
    }
    loop {
        if state.epoch >= schedule.max_epochs {
            state.stopped = Some(StopReason::MaxEpochs);
            return Ok(FitOutcome {
                state,
                stop_reason: StopReason::MaxEpochs,
            });
        }
        let epoch = state.epoch + 1;
        let lr = state.tracker.lr;
        state.optimizer.lr = lr;
        let mut rng = Rng::stream(schedule.seed, epoch as u64);
        let stats = train_epoch(model, &mut state.optimizer, train, &mut rng, schedule.clip_norm)?;
        let report = perplexity(model, validation, schedule.normalization)?;
        let obs = state.tracker.observe(report.perplexity, schedule)?;
        if obs.new_best {
            state.best = Some(BestSnapshot {
                epoch,
                perplexity: report.perplexity,
                params: model.params.clone(),
            });
        }
        let stop = if obs.stop {
            Some(StopReason::EarlyStop)
        } else if epoch >= schedule.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: stats.loss_per_token(),
            train_tokens: stats.tokens,
            valid_ppl: report.perplexity,
            lr,
            lr_halved: obs.halved,
            stalls: state.tracker.stalls,
            best_ppl: state.tracker.best.unwrap_or(f64::INFINITY),
            new_best: obs.new_best,
            max_grad_norm: stats.max_grad_norm,
            clip_norm: schedule.clip_norm,
        };
        state.epoch = epoch;
        state.stopped = stop;
        state.records.push(record.clone());
        on_epoch(model, &state, &record)?;
        if let Some(reason) = stop {
            return Ok(FitOutcome {
                state,
                stop_reason: reason,
            });
        }
    }
}

/// Splits examples into consecutive batches of at most `batch_size`.
pub fn make_batches(
    examples: &[crate::corpus::Example],
    batch_size: usize,
    context_vocab: &crate::corpus::Vocab,
    response_vocab: &crate::corpus::Vocab,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::parameter("batch size must be positive"));
    }
    examples
        .chunks(batch_size)
        .map(|c| Batch::encode(c, context_vocab, response_vocab))
        .collect()
}
