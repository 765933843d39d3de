//! Seeded random stream shared by weight init, synthetic data and shuffling.
//!
//! Everything is derived from a SplitMix64 stream so the exact sequence can be
//! reproduced outside Rust:
//!
//! * `next_f64`: `(x >> 11) * 2^-53`
//! * `normal`: Box-Muller, cosine branch only, `u1 = 1 - next_f64()`, `u2 = next_f64()`
//! * `below(n)`: `(x * n) >> 64` in 128-bit arithmetic
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`
//! * `derive(seed, tag)`: first SplitMix64 output of state `seed ^ (tag * 0x9E3779B97F4A7C15)`

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags used when deriving independent sub-seeds.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SYNTHETIC_TRAIN: u64 = 3;
    pub const SYNTHETIC_TEST: u64 = 4;
}

pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent sub-seed for a labelled purpose (e.g. the shuffle of one epoch).
    pub fn derive(seed: u64, tag: u64) -> u64 {
        SeededRng::new(seed ^ tag.wrapping_mul(GOLDEN)).next_u64()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
