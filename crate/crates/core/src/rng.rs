//! Deterministic random number generation.
//!
//! All stochastic pieces of the pipeline (init, shuffling, augmentation,
//! synthetic data) draw from this wrapper around ChaCha8. The stream is a
//! pure function of the 64-bit seed and is platform-independent. Per-fold
//! and per-purpose streams are derived with SplitMix64 so that independent
//! work units never share a stream.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

/// SplitMix64 finalizer; used to derive child seeds from (seed, label) pairs.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for a labelled work unit (e.g. a fold index).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(label.wrapping_add(0x51ed_270b)))
}

/// Seeded generator with the handful of distributions the pipeline needs.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child generator for a labelled sub-task.
    pub fn derive(seed: u64, label: u64) -> Self {
        Rng::new(derive_seed(seed, label))
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Beta(alpha, alpha) draw; alpha must be positive.
    pub fn beta_symmetric(&mut self, alpha: f64) -> f64 {
        let beta = Beta::new(alpha, alpha).expect("beta alpha must be positive");
        beta.sample(&mut self.inner)
    }

    pub fn gen_bool(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }
}
