//! Deterministic random number generation.
//!
//! All randomness in a run flows from one seed through a ChaCha8 stream.
//! Normal variates use the Box-Muller transform (two uniforms per draw, the
//! sine partner discarded) so the stream position advances by a fixed amount
//! per draw and the generator state round-trips through checkpoints exactly.

use crate::tensor::Tensor;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

#[derive(Debug, Clone)]
pub struct NoviRng {
    rng: ChaCha8Rng,
}

/// Serializable generator state: seed plus stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl NoviRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        NoviRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent generator for an auxiliary task (evaluation,
    /// grid cell) without disturbing this stream.
    pub fn fork(&self, tag: u64) -> Self {
        let seed = self.rng.get_seed();
        let mut mixed = [0u8; 32];
        mixed.copy_from_slice(&seed);
        for (i, b) in tag.to_le_bytes().iter().enumerate() {
            mixed[i] ^= b.wrapping_mul(0x9e).wrapping_add(*b) ^ (i as u8);
            mixed[8 + i] ^= *b;
        }
        NoviRng {
            rng: ChaCha8Rng::from_seed(mixed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_word_pos(state.word_pos);
        NoviRng { rng }
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/product mismatch")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.uniform_range(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/product mismatch")
    }

    /// Unbiased integer in `[0, bound)` by rejection.
    pub fn next_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// `count` distinct indices from `[0, n)`, by partial Fisher-Yates.
    pub fn sample_without_replacement(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.next_index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }

    /// Uniformly shuffled permutation of `[0, n)`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        self.sample_without_replacement(n, n)
    }
}
