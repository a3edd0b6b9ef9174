//! Greedy and beam-search generation.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, ContextInput, EncodedContext, Forward, Hran, ModelVars, StepTrace};
use crate::numerics::{Graph, Var};

/// One transition of an autoregressive model.
pub struct Step<S> {
    pub state: S,
    /// Log-probabilities over the output vocabulary. `-inf` marks banned ids.
    pub log_probs: Vec<f64>,
    pub trace: Option<StepTrace>,
}

/// What the decoders need from a model.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    /// Longest output, EOS included.
    fn max_len(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    fn step(&self, state: &Self::State, prev: usize) -> Result<Step<Self::State>>;
}

/// Sets `banned` positions to `-inf`.
pub fn suppress_tokens(log_probs: &mut [f64], banned: &[usize]) {
    for &b in banned {
        if let Some(v) = log_probs.get_mut(b) {
            *v = f64::NEG_INFINITY;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Emitted ids without the terminating EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Whether generation ended with EOS rather than the length limit.
    pub finished: bool,
    pub trace: AttentionTrace,
}

/// Picks the most probable token at every step; ties go to the smallest id.
pub fn greedy_decode<M: StepModel>(model: &M) -> Result<Decoded> {
    let mut state = model.start()?;
    let mut prev = BOS;
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        trace: AttentionTrace::default(),
    };
    for _ in 0..model.max_len() {
        let step = model.step(&state, prev)?;
        let (best, lp) = argmax(&step.log_probs)?;
        out.log_prob += lp;
        out.trace.steps.extend(step.trace);
        state = step.state;
        if best == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(best);
        prev = best;
    }
    Ok(out)
}

fn argmax(log_probs: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in log_probs.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Numeric {
                what: "decoder log-probabilities".into(),
                index: i,
            });
        }
        if v > f64::NEG_INFINITY && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::contract("every token is banned"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub width: usize,
    pub n_best: usize,
    /// Rank returned hypotheses by log-probability per token instead of the
    /// plain sum.
    pub length_normalize: bool,
}

impl Default for BeamOptions {
    fn default() -> Self {
        Self {
            width: 10,
            n_best: 1,
            length_normalize: false,
        }
    }
}

/// A finished (or length-capped) beam entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted ids without the terminating EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Output length counting the EOS, if any.
    fn len(&self) -> usize {
        self.tokens.len() + self.finished as usize
    }

    fn score(&self, normalize: bool) -> f64 {
        if normalize {
            self.log_prob / self.len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

// Higher log-probability first, then lexicographically smaller ids.
fn rank(a_lp: f64, a: &[usize], b_lp: f64, b: &[usize]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a.cmp(b))
}

/// Beam search without length normalization during the search. Each step
/// expands every live hypothesis by every token and keeps the best `width`
/// candidates; those ending in EOS or reaching the length limit retire to a
/// pool. Returns the best `n_best` of the pool, best first.
pub fn beam_search<M: StepModel>(model: &M, opts: &BeamOptions) -> Result<Vec<Hypothesis>> {
    if opts.width == 0 {
        return Err(Error::parameter("beam width must be at least 1"));
    }
    if opts.n_best == 0 || opts.n_best > opts.width {
        return Err(Error::parameter("n-best must be between 1 and the beam width"));
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start()?,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let max_len = model.max_len();
    while !live.is_empty() {
        // (parent, token, cumulative log-prob)
        let mut steps = Vec::with_capacity(live.len());
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (p, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let step = model.step(&h.state, prev)?;
            for (tok, &lp) in step.log_probs.iter().enumerate() {
                if lp.is_nan() {
                    return Err(Error::Numeric {
                        what: "decoder log-probabilities".into(),
                        index: tok,
                    });
                }
                if lp > f64::NEG_INFINITY {
                    cands.push((p, tok, h.log_prob + lp));
                }
            }
            steps.push(step.state);
        }
        let key = |c: &(usize, usize, f64)| {
            let mut t = live[c.0].tokens.clone();
            t.push(c.1);
            t
        };
        cands.sort_by(|a, b| rank(a.2, &key(a), b.2, &key(b)));
        cands.truncate(opts.width);

        let mut next = Vec::with_capacity(cands.len());
        for (p, tok, lp) in cands {
            let mut tokens = live[p].tokens.clone();
            if tok == EOS {
                pool.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
                continue;
            }
            tokens.push(tok);
            if tokens.len() >= max_len {
                pool.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
                continue;
            }
            next.push(Live {
                tokens,
                log_prob: lp,
                state: steps[p].clone(),
            });
        }
        live = next;

        // log-probs only fall, so once n_best retired entries beat every live
        // hypothesis nothing can overtake them
        if !opts.length_normalize && pool.len() >= opts.n_best {
            pool.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
            let bar = pool[opts.n_best - 1].log_prob;
            if live.iter().all(|h| h.log_prob < bar) {
                break;
            }
        }
    }
    let norm = opts.length_normalize;
    pool.sort_by(|a, b| rank(a.score(norm), &a.tokens, b.score(norm), &b.tokens));
    pool.truncate(opts.n_best);
    Ok(pool)
}

/// Ids never generated by default: padding, sequence start, and UNK unless
/// explicitly allowed.
pub fn default_banned(allow_unk: bool) -> Vec<usize> {
    if allow_unk {
        vec![PAD, BOS]
    } else {
        vec![PAD, BOS, UNK]
    }
}

/// [`StepModel`] view of a network conditioned on one context. Decoder
/// states live on an internal graph that grows with every step.
pub struct HranDecoder<'a> {
    model: &'a Hran,
    graph: RefCell<Graph>,
    vars: ModelVars,
    encoded: EncodedContext,
    banned: Vec<usize>,
    max_len: usize,
}

impl<'a> HranDecoder<'a> {
    pub fn new(model: &'a Hran, context: &ContextInput, banned: Vec<usize>) -> Result<Self> {
        for &id in context.utterances.iter().flatten() {
            if id >= model.config.context_vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    size: model.config.context_vocab_size,
                });
            }
        }
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let encoded = Forward::new(&model.config, &mut g, &vars).encode_words(context)?;
        Ok(Self {
            model,
            graph: RefCell::new(g),
            vars,
            encoded,
            banned,
            max_len: model.config.max_decode_length,
        })
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }
}

impl StepModel for HranDecoder<'_> {
    type State = Var;

    fn vocab_size(&self) -> usize {
        self.model.config.response_vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn start(&self) -> Result<Var> {
        let mut g = self.graph.borrow_mut();
        Ok(Forward::new(&self.model.config, &mut g, &self.vars).initial_state())
    }

    fn step(&self, state: &Var, prev: usize) -> Result<Step<Var>> {
        let mut g = self.graph.borrow_mut();
        let mut fwd = Forward::new(&self.model.config, &mut g, &self.vars);
        let att = fwd.attend_step(&self.encoded, *state)?;
        let (s, lp) = fwd.decode_step(prev, *state, att.context)?;
        let mut log_probs = g.value(lp).data().to_vec();
        suppress_tokens(&mut log_probs, &self.banned);
        Ok(Step {
            state: s,
            log_probs,
            trace: Some(att.trace),
        })
    }
}


/// Toy model whose next-token distribution is an arbitrary function of the
/// prefix, drawn at random per prefix. Useful as a search oracle target.
#[derive(Debug, Clone)]
pub struct PrefixTableModel {
    vocab_size: usize,
    max_len: usize,
    seed: u64,
    banned: Vec<usize>,
    /// Logit scale; larger values give peakier distributions.
    pub temperature: f64,
}

impl PrefixTableModel {
    pub fn new(vocab_size: usize, max_len: usize, seed: u64, banned: Vec<usize>) -> Self {
        Self {
            vocab_size,
            max_len,
            seed,
            banned,
            temperature: 2.0,
        }
    }

    /// The distribution after `prefix`, independent of call order.
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1);
        }
        h = h.wrapping_mul(31).wrapping_add(prefix.len() as u64);
        let mut rng = crate::numerics::Rng::new(h);
        let mut mask = vec![true; self.vocab_size];
        for &b in &self.banned {
            mask[b] = false;
        }
        let logits: Vec<f64> = (0..self.vocab_size)
            .map(|_| self.temperature * rng.standard_normal())
            .collect();
        crate::numerics::masked_log_softmax_values(&logits, &mask).expect("some token allowed")
    }
}

impl StepModel for PrefixTableModel {
    /// Tokens before the one being consumed; `None` until BOS is consumed.
    type State = Option<Vec<usize>>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn start(&self) -> Result<Self::State> {
        Ok(None)
    }

    fn step(&self, state: &Self::State, prev: usize) -> Result<Step<Self::State>> {
        let prefix = match state {
            None => Vec::new(),
            Some(p) => {
                let mut p = p.clone();
                p.push(prev);
                p
            }
        };
        Ok(Step {
            log_probs: self.log_probs(&prefix),
            state: Some(prefix),
            trace: None,
        })
    }
}
