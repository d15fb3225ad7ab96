// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness.
//!
//! The generator is xoshiro256** (Blackman and Vigna), seeded by expanding
//! the 64-bit seed through SplitMix64. Gaussian draws use the ziggurat
//! sampler of `rand_distr::StandardNormal`. This pairing is fixed: weights
//! and datasets are reproducible from their seed alone.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use super::Tensor2;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Xoshiro256StarStar,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent child stream, keyed by `tag`.
    pub fn fork(&mut self, tag: u64) -> SeededRng {
        let base = self.inner.next_u64();
        SeededRng::new(base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian_vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| self.gaussian() * scale).collect()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Tensor2 {
        let data = self.gaussian_vec(rows * cols, scale);
        Tensor2::from_vec(rows, cols, data).expect("sized by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(8);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn gaussian_mean_within_three_sigma() {
        let n = 100_000;
        let mut r = SeededRng::new(2024);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += r.gaussian();
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pins the algorithm: changing generator or seeding breaks this.
        let mut a = SeededRng::new(0);
        let first = a.next_u64();
        let mut b = Xoshiro256StarStar::seed_from_u64(0);
        assert_eq!(first, b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = SeededRng::new(1);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
