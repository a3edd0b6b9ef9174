use alloc::string::String;
use alloc::vec::Vec;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Embedding, GruParams, GruVars, MlpScorerParams, MlpVars};
use crate::numerics::{gaussian_init, Graph, Rng, Tensor, Var};

/// Every trainable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub context_embedding: Embedding,
    pub response_embedding: Embedding,
    pub word_fwd: GruParams,
    pub word_bwd: GruParams,
    /// Backward GRU over attention-pooled utterance vectors.
    pub utterance_gru: GruParams,
    /// Scorer over `(s_{t-1}, l_{i+1,t}, h_{i,j})`, or `(s_{t-1}, h_{i,j})`
    /// without the utterance dependency.
    pub word_scorer: MlpScorerParams,
    /// Scorer over `(s_{t-1}, l_{i,t})`.
    pub utterance_scorer: MlpScorerParams,
    pub decoder: GruParams,
    /// `[response_vocab × (decoder_hidden + embed_dim)]`.
    pub output_projection: Tensor,
    pub h0_fwd: Tensor,
    pub h0_bwd: Tensor,
    /// Initial utterance-level state `l_{m+1}`, shared across decode steps.
    pub l_init: Tensor,
}

impl ModelParams {
    /// Gaussian initialization of every tensor, in layout order.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let sigma = config.init_sigma();
        let tensors = config
            .param_layout()
            .iter()
            .map(|(_, shape)| gaussian_init(rng, shape, sigma))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    /// All-zero parameters with the layout of `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let tensors = config
            .param_layout()
            .iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Rebuilds the container from tensors in layout order, checking shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Compatibility(alloc::format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Compatibility(alloc::format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let word_args = config.word_scorer_args().len();
        let mut it = tensors.into_iter();
        let mut take = || it.next().expect("length checked");
        let gru = |take: &mut dyn FnMut() -> Tensor| GruParams {
            w_z: take(),
            w_r: take(),
            w_s: take(),
            v_z: take(),
            v_r: take(),
            v_s: take(),
        };
        let context_embedding = Embedding { table: take() };
        let response_embedding = Embedding { table: take() };
        let word_fwd = gru(&mut take);
        let word_bwd = gru(&mut take);
        let utterance_gru = gru(&mut take);
        let word_scorer = MlpScorerParams {
            projections: (0..word_args).map(|_| take()).collect(),
            readout: take(),
        };
        let utterance_scorer = MlpScorerParams {
            projections: (0..2).map(|_| take()).collect(),
            readout: take(),
        };
        let decoder = gru(&mut take);
        Ok(Self {
            context_embedding,
            response_embedding,
            word_fwd,
            word_bwd,
            utterance_gru,
            word_scorer,
            utterance_scorer,
            decoder,
            output_projection: take(),
            h0_fwd: take(),
            h0_bwd: take(),
            l_init: take(),
        })
    }

    /// Tensors in layout order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.push(&self.context_embedding.table);
        out.push(&self.response_embedding.table);
        for gru in [&self.word_fwd, &self.word_bwd, &self.utterance_gru] {
            out.extend(gru.tensors());
        }
        for scorer in [&self.word_scorer, &self.utterance_scorer] {
            out.extend(scorer.projections.iter());
            out.push(&scorer.readout);
        }
        out.extend(self.decoder.tensors());
        out.push(&self.output_projection);
        out.push(&self.h0_fwd);
        out.push(&self.h0_bwd);
        out.push(&self.l_init);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.push(&mut self.context_embedding.table);
        out.push(&mut self.response_embedding.table);
        for gru in [&mut self.word_fwd, &mut self.word_bwd, &mut self.utterance_gru] {
            out.extend(gru.tensors_mut());
        }
        for scorer in [&mut self.word_scorer, &mut self.utterance_scorer] {
            out.extend(scorer.projections.iter_mut());
            out.push(&mut scorer.readout);
        }
        out.extend(self.decoder.tensors_mut());
        out.push(&mut self.output_projection);
        out.push(&mut self.h0_fwd);
        out.push(&mut self.h0_bwd);
        out.push(&mut self.l_init);
        out
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn names(config: &ModelConfig) -> Vec<String> {
        config.param_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Places every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.leaf(t.clone())).collect();
        ModelVars::from_slice(self.word_scorer.arity(), &vars)
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Same-shaped container holding the gradients accumulated on `g`.
    pub fn gradients(config: &ModelConfig, g: &Graph, vars: &ModelVars) -> Result<Self> {
        let tensors = vars.all().into_iter().map(|v| g.grad_tensor(v)).collect();
        Self::from_tensors(config, tensors)
    }
}

/// [`ModelParams`] placed on a graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub context_embedding: Var,
    pub response_embedding: Var,
    pub word_fwd: GruVars,
    pub word_bwd: GruVars,
    pub utterance_gru: GruVars,
    pub word_scorer: MlpVars,
    pub utterance_scorer: MlpVars,
    pub decoder: GruVars,
    pub output_projection: Var,
    pub h0_fwd: Var,
    pub h0_bwd: Var,
    pub l_init: Var,
}

impl ModelVars {
    /// Expects one var per tensor, in layout order.
    pub fn from_slice(word_args: usize, v: &[Var]) -> Self {
        let mut i = 0;
        let mut next = |n: usize| {
            let s = &v[i..i + n];
            i += n;
            s
        };
        let context_embedding = next(1)[0];
        let response_embedding = next(1)[0];
        let word_fwd = GruVars::from_slice(next(6));
        let word_bwd = GruVars::from_slice(next(6));
        let utterance_gru = GruVars::from_slice(next(6));
        let word_scorer = MlpVars {
            projections: next(word_args).to_vec(),
            readout: next(1)[0],
        };
        let utterance_scorer = MlpVars {
            projections: next(2).to_vec(),
            readout: next(1)[0],
        };
        let decoder = GruVars::from_slice(next(6));
        Self {
            context_embedding,
            response_embedding,
            word_fwd,
            word_bwd,
            utterance_gru,
            word_scorer,
            utterance_scorer,
            decoder,
            output_projection: next(1)[0],
            h0_fwd: next(1)[0],
            h0_bwd: next(1)[0],
            l_init: next(1)[0],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = alloc::vec![self.context_embedding, self.response_embedding];
        for gru in [&self.word_fwd, &self.word_bwd, &self.utterance_gru] {
            out.extend(gru.vars());
        }
        for scorer in [&self.word_scorer, &self.utterance_scorer] {
            out.extend(scorer.projections.iter().copied());
            out.push(scorer.readout);
        }
        out.extend(self.decoder.vars());
        out.extend([self.output_projection, self.h0_fwd, self.h0_bwd, self.l_init]);
        out
    }
}
