//! Seeded pseudorandom source.
//!
//! The generator is xoshiro256++ (Blackman and Vigna), seeded from a 64-bit
//! value through SplitMix64. Gaussian draws use the ziggurat sampler of
//! `rand_distr`. Independent streams are obtained with the generator's jump
//! function, which advances the state by 2^128 draws per stream index.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Stream `index` of `seed`, disjoint from every other stream of the same seed.
    pub fn stream(seed: u64, index: u64) -> Self {
        let mut inner = Xoshiro256PlusPlus::seed_from_u64(seed);
        for _ in 0..=index {
            inner.jump();
        }
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// I.i.d. `N(0, sigma²)` entries.
pub fn gaussian_init(rng: &mut Rng, shape: &[usize], sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::parameter("gaussian sigma must be positive and finite"));
    }
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = sigma * rng.standard_normal();
    }
    Ok(t)
}
