use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::math;

/// Which attention component is replaced, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Word attention does not see the next utterance-level state.
    NoUdAtt,
    /// Word weights replaced by the uniform distribution over real words.
    NoWordAtt,
    /// Utterance weights replaced by the uniform distribution over utterances.
    NoUttAtt,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoUdAtt,
        Ablation::NoWordAtt,
        Ablation::NoUttAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoUdAtt => "no-ud-att",
            Ablation::NoWordAtt => "no-word-att",
            Ablation::NoUttAtt => "no-utt-att",
        }
    }
}

/// Storage precision of trained parameters. Arithmetic is always `f64`;
/// `F32` rounds parameters to single precision after every update and
/// stores them as `f32` in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

/// How `init_scale` is read: as the variance or as the standard deviation
/// of the initial Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSpread {
    Variance,
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per direction; word states are `2 * word_hidden` wide.
    pub word_hidden: usize,
    pub utt_hidden: usize,
    pub decoder_hidden: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub context_vocab_size: usize,
    pub response_vocab_size: usize,
    pub ablation: Ablation,
    pub max_decode_length: usize,
    pub precision: Precision,
    pub init_scale: f64,
    pub init_spread: InitSpread,
    pub seed: u64,
}

/// Desk dimensions with empty vocabularies, to be filled in by the caller.
impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0, 0)
    }
}

impl ModelConfig {
    /// Small dimensions suitable for laptop training.
    pub fn desk(context_vocab_size: usize, response_vocab_size: usize) -> Self {
        Self {
            word_hidden: 16,
            utt_hidden: 16,
            decoder_hidden: 16,
            embed_dim: 16,
            attn_dim: 16,
            context_vocab_size,
            response_vocab_size,
            ablation: Ablation::Full,
            max_decode_length: 20,
            precision: Precision::F64,
            init_scale: 0.01,
            init_spread: InitSpread::Variance,
            seed: 0,
        }
    }

    /// Dimensions used for the large-corpus setting: 1000-dim recurrent
    /// states, 620-dim embeddings, 40k-word vocabularies plus reserved ids.
    pub fn large() -> Self {
        Self {
            word_hidden: 1000,
            utt_hidden: 1000,
            decoder_hidden: 1000,
            embed_dim: 620,
            attn_dim: 1000,
            context_vocab_size: 40_004,
            response_vocab_size: 40_004,
            max_decode_length: 50,
            ..Self::desk(40_004, 40_004)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_hidden", self.word_hidden),
            ("utt_hidden", self.utt_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("context_vocab_size", self.context_vocab_size),
            ("max_decode_length", self.max_decode_length),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::parameter(format!("{name} must be positive")));
            }
        }
        if self.response_vocab_size <= crate::corpus::EOS {
            return Err(Error::parameter("response vocabulary must contain the reserved tokens"));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::parameter("init_scale must be positive"));
        }
        Ok(())
    }

    /// Standard deviation of the initial Gaussian.
    pub fn init_sigma(&self) -> f64 {
        match self.init_spread {
            InitSpread::Variance => math::sqrt(self.init_scale),
            InitSpread::StdDev => self.init_scale,
        }
    }

    pub fn word_state_dim(&self) -> usize {
        2 * self.word_hidden
    }

    /// Argument widths of the word-level scorer.
    pub fn word_scorer_args(&self) -> Vec<usize> {
        match self.ablation {
            Ablation::NoUdAtt => vec![self.decoder_hidden, self.word_state_dim()],
            _ => vec![self.decoder_hidden, self.utt_hidden, self.word_state_dim()],
        }
    }

    pub fn utterance_scorer_args(&self) -> Vec<usize> {
        vec![self.decoder_hidden, self.utt_hidden]
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.embed_dim + self.utt_hidden
    }

    pub fn readout_input_dim(&self) -> usize {
        self.decoder_hidden + self.embed_dim
    }

    /// Names and shapes of every trainable tensor, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.push((
            "context_embedding".into(),
            vec![self.context_vocab_size, self.embed_dim],
        ));
        out.push((
            "response_embedding".into(),
            vec![self.response_vocab_size, self.embed_dim],
        ));
        let grus = [
            ("word_fwd", self.word_hidden, self.embed_dim),
            ("word_bwd", self.word_hidden, self.embed_dim),
            ("utterance_gru", self.utt_hidden, self.word_state_dim()),
        ];
        for (prefix, hidden, input) in grus {
            push_gru(&mut out, prefix, hidden, input);
        }
        push_scorer(&mut out, "word_scorer", self.attn_dim, &self.word_scorer_args());
        push_scorer(
            &mut out,
            "utterance_scorer",
            self.attn_dim,
            &self.utterance_scorer_args(),
        );
        push_gru(&mut out, "decoder", self.decoder_hidden, self.decoder_input_dim());
        out.push((
            "output_projection".into(),
            vec![self.response_vocab_size, self.readout_input_dim()],
        ));
        out.push(("h0_fwd".into(), vec![self.word_hidden]));
        out.push(("h0_bwd".into(), vec![self.word_hidden]));
        out.push(("l_init".into(), vec![self.utt_hidden]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Short stable digest of the configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&format!("{self:?}"))
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn fingerprint_of(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn push_gru(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, hidden: usize, input: usize) {
    for (k, name) in crate::layers::GRU_TENSORS.iter().enumerate() {
        let shape = if k < 3 {
            vec![hidden, input]
        } else {
            vec![hidden, hidden]
        };
        out.push((format!("{prefix}.{name}"), shape));
    }
}

fn push_scorer(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, attn: usize, args: &[usize]) {
    for (k, &d) in args.iter().enumerate() {
        out.push((format!("{prefix}.P{k}"), vec![attn, d]));
    }
    out.push((format!("{prefix}.v"), vec![attn]));
}
