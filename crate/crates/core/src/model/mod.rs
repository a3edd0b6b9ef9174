//! The hierarchical recurrent attention network.

mod config;
mod forward;
mod params;

pub use config::{fingerprint_of, Ablation, InitSpread, ModelConfig, Precision};
pub use forward::{uniform_over, AttendOutput, AttentionTrace, ContextInput, EncodedContext, Forward, StepTrace};
pub use params::{ModelParams, ModelVars};

use crate::error::Result;
use crate::numerics::{Graph, Rng};

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hran {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Loss of one example with the gradient of every parameter.
#[derive(Debug, Clone)]
pub struct LossAndGradients {
    pub loss: f64,
    pub tokens: usize,
    pub gradients: ModelParams,
}

impl Hran {
    /// Fresh network initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed);
        let mut params = ModelParams::init(&config, &mut rng)?;
        if config.precision == Precision::F32 {
            params.round_to_f32();
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::from_tensors(&config, params.into_tensors())?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Teacher-forced negative log-likelihood of `target` (EOS-terminated).
    pub fn forward_nll(&self, context: &ContextInput, target: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let (loss, _) = Forward::new(&self.config, &mut g, &vars).nll(context, target, false)?;
        Ok(g.scalar(loss))
    }

    /// As [`Hran::forward_nll`], also returning the attention weights of every step.
    pub fn forward_nll_traced(&self, context: &ContextInput, target: &[usize]) -> Result<(f64, AttentionTrace)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let (loss, trace) = Forward::new(&self.config, &mut g, &vars).nll(context, target, true)?;
        Ok((g.scalar(loss), trace.unwrap_or_default()))
    }

    pub fn loss_and_gradients(&self, context: &ContextInput, target: &[usize]) -> Result<LossAndGradients> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let (loss, _) = Forward::new(&self.config, &mut g, &vars).nll(context, target, false)?;
        g.backward(loss)?;
        Ok(LossAndGradients {
            loss: g.scalar(loss),
            tokens: target.len(),
            gradients: ModelParams::gradients(&self.config, &g, &vars)?,
        })
    }
}
