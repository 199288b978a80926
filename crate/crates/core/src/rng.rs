//! Seeded, portable random numbers.
//!
//! Every stochastic choice in the lab draws from [`Rng`], a ChaCha8 stream
//! keyed by a 64-bit seed. ChaCha output is specified bit-for-bit, so a seed
//! reproduces the same draws on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::TensorError;

/// Identifier recorded in run manifests.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9";

#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`] in its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, e.g. one per task or per component.
    pub fn fork(&mut self, salt: u64) -> Rng {
        let s = self.inner.next_u64() ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Rng::new(s)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut r = Self::new(state.seed);
        r.inner.set_word_pos(state.word_pos);
        r
    }

    /// Uniform integer on the inclusive range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> Result<i64, TensorError> {
        if lo > hi {
            return Err(TensorError::EmptyRange { lo, hi });
        }
        Ok(self.inner.random_range(lo..=hi))
    }

    /// Uniform index on `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `[0, len)`, in draw order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, len, amount).into_vec()
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
