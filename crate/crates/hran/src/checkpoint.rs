//! Binary checkpoints.
//!
//! Layout: the magic `HRAN1`, a little-endian `u64` header length, the UTF-8
//! JSON header, then every tensor of the manifest as raw little-endian
//! floats. Manifest offsets count from the first payload byte; tensors are
//! stored back to back in manifest order.

use std::path::Path;

use hran_core::corpus::Vocab;
use hran_core::model::{Hran, ModelConfig, ModelParams, Precision};
use hran_core::numerics::Tensor;
use hran_core::training::{AdaDelta, BestSnapshot, EpochRecord, FitState, ScheduleTracker, StopReason, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::config::{DecodeOptions, RunConfig, RunPaths};
use crate::error::{CliError, CliResult};
use crate::io::{read_bytes, write_atomic};

pub const MAGIC: &[u8; 5] = b"HRAN1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// End of the latest epoch, with optimizer state for resuming.
    Last,
    /// Parameters of the best validation epoch.
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BestHeader {
    epoch: usize,
    perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingHeader {
    tracker: ScheduleTracker,
    records: Vec<EpochRecord>,
    stopped: Option<StopReason>,
    best: Option<BestHeader>,
    rho: f64,
    epsilon: f64,
    optimizer_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    role: Role,
    fingerprint: String,
    config: ModelConfig,
    schedule: TrainSchedule,
    epoch: usize,
    lr: f64,
    paths: RunPaths,
    decode: DecodeOptions,
    seed: u64,
    valid_ppl: Option<f64>,
    context_vocab: Vec<String>,
    response_vocab: Vec<String>,
    training: Option<TrainingHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub run: RunConfig,
    /// Epoch the parameters come from.
    pub epoch: usize,
    pub valid_ppl: Option<f64>,
    pub context_vocab: Vocab,
    pub response_vocab: Vocab,
    pub model: Hran,
    /// Present in `Last` checkpoints.
    pub fit: Option<FitState>,
}

const PARAMS: &str = "params.";
const MEAN_SQ_GRAD: &str = "adadelta.mean_sq_grad.";
const MEAN_SQ_DELTA: &str = "adadelta.mean_sq_delta.";
const BEST: &str = "best.";

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.run.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = &self.model.config;
        let names = ModelParams::names(config);
        let param_dtype = match config.precision {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        };
        let mut groups: Vec<(&str, Dtype, Vec<&Tensor>)> = vec![(PARAMS, param_dtype, self.model.params.tensors())];
        if let Some(fit) = &self.fit {
            groups.push((MEAN_SQ_GRAD, Dtype::F64, fit.optimizer.mean_sq_grad.iter().collect()));
            groups.push((MEAN_SQ_DELTA, Dtype::F64, fit.optimizer.mean_sq_delta.iter().collect()));
            if let Some(best) = &fit.best {
                groups.push((BEST, param_dtype, best.params.tensors()));
            }
        }
        let tensors: Vec<(String, Dtype, &Tensor)> = groups
            .into_iter()
            .flat_map(|(prefix, dtype, ts)| {
                names
                    .iter()
                    .zip(ts)
                    .map(move |(n, t)| (format!("{prefix}{n}"), dtype, t))
            })
            .collect();
        let mut manifest = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        for (name, dtype, t) in &tensors {
            manifest.push(TensorEntry {
                name: name.clone(),
                dtype: *dtype,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                match dtype {
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let training = self.fit.as_ref().map(|f| TrainingHeader {
            tracker: f.tracker.clone(),
            records: f.records.clone(),
            stopped: f.stopped,
            best: f.best.as_ref().map(|b| BestHeader {
                epoch: b.epoch,
                perplexity: b.perplexity,
            }),
            rho: f.optimizer.rho,
            epsilon: f.optimizer.epsilon,
            optimizer_lr: f.optimizer.lr,
        });
        let header = Header {
            format: FORMAT_VERSION,
            role: self.role,
            fingerprint: self.fingerprint(),
            config: config.clone(),
            schedule: self.run.schedule.clone(),
            epoch: self.epoch,
            lr: self.fit.as_ref().map_or(self.run.schedule.initial_lr, |f| f.tracker.lr),
            paths: self.run.paths.clone(),
            decode: self.run.decode.clone(),
            seed: self.run.seed,
            valid_ppl: self.valid_ppl,
            context_vocab: self.context_vocab.tokens().to_vec(),
            response_vocab: self.response_vocab.tokens().to_vec(),
            training,
            tensors: manifest,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a checkpoint. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let err = |offset: usize, msg: String| CliError::checkpoint(path, offset as u64, msg);
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err(0, "not a checkpoint (bad magic)".into()));
        }
        let len_at = MAGIC.len();
        let len_bytes: [u8; 8] = bytes
            .get(len_at..len_at + 8)
            .ok_or_else(|| err(len_at, "truncated header length".into()))?
            .try_into()
            .expect("eight bytes");
        let header_len = u64::from_le_bytes(len_bytes);
        let header_at = len_at + 8;
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| header_at.checked_add(l))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| err(len_at, format!("header length {header_len} exceeds the file")))?;
        let header: Header = serde_json::from_slice(&bytes[header_at..header_end])
            .map_err(|e| err(header_at, format!("bad header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(err(header_at, format!("unsupported format version {}", header.format)));
        }

        let payload = &bytes[header_end..];
        let mut cursor = 0usize;
        let mut read = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let at = header_end + cursor;
            if entry.offset != cursor as u64 {
                return Err(err(
                    at,
                    format!("tensor {} at offset {}, expected {cursor}", entry.name, entry.offset),
                ));
            }
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| err(at, format!("tensor {} shape overflows", entry.name)))?;
            let len = count
                .checked_mul(entry.dtype.width())
                .filter(|&l| cursor + l <= payload.len())
                .ok_or_else(|| err(at, format!("tensor {} runs past the end of the file", entry.name)))?;
            let raw = &payload[cursor..cursor + len];
            let data: Vec<f64> = match entry.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| err(at, e.to_string()))?;
            read.push((entry.name.as_str(), tensor, at));
            cursor += len;
        }
        if cursor != payload.len() {
            return Err(err(header_end + cursor, "trailing bytes after the last tensor".into()));
        }

        let config = header.config.clone();
        let names = ModelParams::names(&config);
        let mut it = read.into_iter().peekable();
        let mut take_group = |prefix: &str| -> CliResult<Option<Vec<Tensor>>> {
            if !it.peek().is_some_and(|(n, _, _)| n.starts_with(prefix)) {
                return Ok(None);
            }
            let mut out = Vec::with_capacity(names.len());
            for name in &names {
                match it.next() {
                    Some((n, t, _)) if n.strip_prefix(prefix) == Some(name.as_str()) => out.push(t),
                    Some((n, _, at)) => return Err(err(at, format!("expected tensor {prefix}{name}, found {n}"))),
                    None => return Err(err(bytes.len(), format!("missing tensor {prefix}{name}"))),
                }
            }
            Ok(Some(out))
        };
        let params = take_group(PARAMS)?.ok_or_else(|| err(header_end, "no parameter tensors".into()))?;
        let msg = take_group(MEAN_SQ_GRAD)?;
        let msd = take_group(MEAN_SQ_DELTA)?;
        let best = take_group(BEST)?;
        if let Some((n, _, at)) = it.next() {
            return Err(err(at, format!("unexpected tensor {n}")));
        }

        let vocab_err = |e: hran_core::Error| err(header_at, format!("bad vocabulary: {e}"));
        let context_vocab = Vocab::from_tokens(header.context_vocab).map_err(vocab_err)?;
        let response_vocab = Vocab::from_tokens(header.response_vocab).map_err(vocab_err)?;
        if context_vocab.len() != config.context_vocab_size || response_vocab.len() != config.response_vocab_size {
            return Err(err(header_at, "vocabulary sizes disagree with the model config".into()));
        }
        let core_err = |e: hran_core::Error| err(header_end, e.to_string());
        let params = ModelParams::from_tensors(&config, params).map_err(core_err)?;
        let model = Hran::from_params(config.clone(), params).map_err(core_err)?;

        let fit = match (header.training, msg, msd) {
            (None, None, None) => None,
            (Some(t), Some(msg), Some(msd)) => {
                let best = match (t.best, best) {
                    (None, None) => None,
                    (Some(b), Some(ts)) => Some(BestSnapshot {
                        epoch: b.epoch,
                        perplexity: b.perplexity,
                        params: ModelParams::from_tensors(&config, ts).map_err(core_err)?,
                    }),
                    _ => return Err(err(header_at, "best snapshot header and tensors disagree".into())),
                };
                Some(FitState {
                    epoch: header.epoch,
                    optimizer: AdaDelta {
                        mean_sq_grad: msg,
                        mean_sq_delta: msd,
                        rho: t.rho,
                        epsilon: t.epsilon,
                        lr: t.optimizer_lr,
                    },
                    tracker: t.tracker,
                    best,
                    records: t.records,
                    stopped: t.stopped,
                })
            }
            _ => return Err(err(header_at, "training state is incomplete".into())),
        };

        let run = RunConfig {
            paths: header.paths,
            model: config,
            schedule: header.schedule,
            decode: header.decode,
            seed: header.seed,
        };
        let ckpt = Checkpoint {
            role: header.role,
            run,
            epoch: header.epoch,
            valid_ppl: header.valid_ppl,
            context_vocab,
            response_vocab,
            model,
            fit,
        };
        if ckpt.fingerprint() != header.fingerprint {
            return Err(err(
                header_at,
                "fingerprint does not match the stored configuration".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }

    /// Checks that training can continue from this checkpoint under `run`
    /// with the given vocabularies. Only `max_epochs` may change.
    pub fn check_resumable(&self, run: &RunConfig, context_vocab: &Vocab, response_vocab: &Vocab) -> CliResult<()> {
        let mismatch = |what: &str| {
            CliError::Core(hran_core::Error::Compatibility(format!(
                "checkpoint {what} differs from the run configuration"
            )))
        };
        if self.role != Role::Last || self.fit.is_none() {
            return Err(CliError::Core(hran_core::Error::Compatibility(
                "only a last-epoch checkpoint carries optimizer state".into(),
            )));
        }
        if self.model.config != run.model {
            return Err(mismatch("model config"));
        }
        let capped = TrainSchedule {
            max_epochs: run.schedule.max_epochs,
            ..self.run.schedule.clone()
        };
        if capped != run.schedule {
            return Err(mismatch("schedule"));
        }
        if &self.context_vocab != context_vocab || &self.response_vocab != response_vocab {
            return Err(mismatch("vocabulary"));
        }
        Ok(())
    }
}
