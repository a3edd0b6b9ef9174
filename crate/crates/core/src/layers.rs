//! Embeddings, the bias-free GRU cell, bidirectional encoding and the tanh
//! MLP attention scorer.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{gaussian_init, Graph, Rng, Tensor, Var};

/// Weights of one GRU: input maps `W_*` are `[hidden × input]`, recurrent
/// maps `V_*` are `[hidden × hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_s: Tensor,
    pub v_z: Tensor,
    pub v_r: Tensor,
    pub v_s: Tensor,
}

pub const GRU_TENSORS: [&str; 6] = ["W_z", "W_r", "W_s", "V_z", "V_r", "V_s"];

impl GruParams {
    pub fn init(rng: &mut Rng, hidden: usize, input: usize, sigma: f64) -> Result<Self> {
        Ok(Self {
            w_z: gaussian_init(rng, &[hidden, input], sigma)?,
            w_r: gaussian_init(rng, &[hidden, input], sigma)?,
            w_s: gaussian_init(rng, &[hidden, input], sigma)?,
            v_z: gaussian_init(rng, &[hidden, hidden], sigma)?,
            v_r: gaussian_init(rng, &[hidden, hidden], sigma)?,
            v_s: gaussian_init(rng, &[hidden, hidden], sigma)?,
        })
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Tensor::zeros(&[hidden, input]);
        let v = Tensor::zeros(&[hidden, hidden]);
        Self {
            w_z: w.clone(),
            w_r: w.clone(),
            w_s: w,
            v_z: v.clone(),
            v_r: v.clone(),
            v_s: v,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols()
    }

    /// Checks the six shapes against each other.
    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden(), self.input());
        for w in [&self.w_z, &self.w_r, &self.w_s] {
            if w.shape() != [h, i] {
                return Err(Error::dimension("gru input weights", w.shape(), &[h, i]));
            }
        }
        for v in [&self.v_z, &self.v_r, &self.v_s] {
            if v.shape() != [h, h] {
                return Err(Error::dimension("gru recurrent weights", v.shape(), &[h, h]));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_z, &self.w_r, &self.w_s, &self.v_z, &self.v_r, &self.v_s]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_s,
            &mut self.v_z,
            &mut self.v_r,
            &mut self.v_s,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> GruVars {
        let t = self.tensors();
        GruVars::from_slice(&t.map(|x| g.leaf(x.clone())))
    }
}

/// [`GruParams`] placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_s: Var,
    pub v_z: Var,
    pub v_r: Var,
    pub v_s: Var,
}

impl GruVars {
    /// Expects the order of [`GruParams::tensors`].
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_z: v[0],
            w_r: v[1],
            w_s: v[2],
            v_z: v[3],
            v_r: v[4],
            v_s: v[5],
        }
    }

    pub fn vars(&self) -> [Var; 6] {
        [self.w_z, self.w_r, self.w_s, self.v_z, self.v_r, self.v_s]
    }
}

/// Embedding table `[vocab × dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn init(rng: &mut Rng, vocab: usize, dim: usize, sigma: f64) -> Result<Self> {
        Ok(Self {
            table: gaussian_init(rng, &[vocab, dim], sigma)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// Parameters of `η(a_1, …, a_n) = vᵀ tanh(Σ_k P_k a_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScorerParams {
    /// One `[attn × d_k]` projection per argument.
    pub projections: Vec<Tensor>,
    /// Readout vector `[attn]`.
    pub readout: Tensor,
}

impl MlpScorerParams {
    pub fn init(rng: &mut Rng, attn: usize, arg_dims: &[usize], sigma: f64) -> Result<Self> {
        let projections = arg_dims
            .iter()
            .map(|&d| gaussian_init(rng, &[attn, d], sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projections,
            readout: gaussian_init(rng, &[attn], sigma)?,
        })
    }

    pub fn arity(&self) -> usize {
        self.projections.len()
    }

    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            projections: self.projections.iter().map(|p| g.leaf(p.clone())).collect(),
            readout: g.leaf(self.readout.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub projections: Vec<Var>,
    pub readout: Var,
}

/// Row `id` of the embedding table; gradient flows only into that row.
pub fn embed_lookup(g: &mut Graph, table: Var, id: usize) -> Result<Var> {
    g.row(table, id)
}

/// One GRU transition without biases:
/// `z = σ(W_z x + V_z h)`, `r = σ(W_r x + V_r h)`,
/// `s = tanh(W_s x + V_s (h ∘ r))`, `h' = (1 − z) ∘ s + z ∘ h`.
pub fn gru_step(g: &mut Graph, p: &GruVars, x: Var, h_prev: Var) -> Result<Var> {
    let wz = g.matmul(p.w_z, x)?;
    let vz = g.matmul(p.v_z, h_prev)?;
    let z_in = g.add(wz, vz)?;
    let z = g.sigmoid(z_in);

    let wr = g.matmul(p.w_r, x)?;
    let vr = g.matmul(p.v_r, h_prev)?;
    let r_in = g.add(wr, vr)?;
    let r = g.sigmoid(r_in);

    let ws = g.matmul(p.w_s, x)?;
    let gated = g.mul(h_prev, r)?;
    let vs = g.matmul(p.v_s, gated)?;
    let s_in = g.add(ws, vs)?;
    let s = g.tanh(s_in);

    let keep = g.one_minus(z);
    let fresh = g.mul(keep, s)?;
    let carried = g.mul(z, h_prev)?;
    g.add(fresh, carried)
}

/// Bidirectional encoding of one token sequence.
///
/// Position `k` of the result is `concat(forward_k, backward_k)`. At masked
/// positions both directions carry their previous state forward unchanged,
/// so trailing padding leaves the real positions untouched.
#[allow(clippy::too_many_arguments)]
pub fn bigru_encode(
    g: &mut Graph,
    fwd: &GruVars,
    bwd: &GruVars,
    embedding: Var,
    ids: &[usize],
    mask: &[bool],
    h0_fwd: Var,
    h0_bwd: Var,
) -> Result<Vec<Var>> {
    if ids.is_empty() {
        return Err(Error::contract("cannot encode an empty sequence"));
    }
    if ids.len() != mask.len() {
        return Err(Error::dimension("bigru_encode mask", &[ids.len()], &[mask.len()]));
    }
    let n = ids.len();
    let mut forward = Vec::with_capacity(n);
    let mut h = h0_fwd;
    for k in 0..n {
        if mask[k] {
            let e = embed_lookup(g, embedding, ids[k])?;
            h = gru_step(g, fwd, e, h)?;
        }
        forward.push(h);
    }
    let mut backward = alloc::vec![h0_bwd; n];
    let mut h = h0_bwd;
    for k in (0..n).rev() {
        if mask[k] {
            let e = embed_lookup(g, embedding, ids[k])?;
            h = gru_step(g, bwd, e, h)?;
        }
        backward[k] = h;
    }
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| g.concat(f, b, 0))
        .collect()
}

/// `P_k a_k` for one argument; reusable when an argument is fixed across calls.
pub fn mlp_project(g: &mut Graph, p: &MlpVars, slot: usize, arg: Var) -> Result<Var> {
    g.matmul(p.projections[slot], arg)
}

/// `vᵀ tanh(Σ projected)` from already projected arguments.
pub fn mlp_readout(g: &mut Graph, p: &MlpVars, projected: &[Var]) -> Result<Var> {
    let mut acc = projected[0];
    for &x in &projected[1..] {
        acc = g.add(acc, x)?;
    }
    let hidden = g.tanh(acc);
    g.dot(p.readout, hidden)
}

/// `η(args) = vᵀ tanh(Σ_k P_k args_k)`: one hidden layer, scalar output, no biases.
pub fn mlp_score(g: &mut Graph, p: &MlpVars, args: &[Var]) -> Result<Var> {
    if args.len() != p.projections.len() {
        return Err(Error::contract(alloc::format!(
            "scorer expects {} arguments, got {}",
            p.projections.len(),
            args.len()
        )));
    }
    let projected = args
        .iter()
        .enumerate()
        .map(|(k, &a)| mlp_project(g, p, k, a))
        .collect::<Result<Vec<_>>>()?;
    mlp_readout(g, p, &projected)
}
