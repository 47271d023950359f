use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{Mat, Scalar};

/// Seeded, platform-independent random stream.
#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng(ChaCha8Rng::seed_from_u64(seed))
}

impl SeededRng {
    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random::<u64>()
    }

    /// Independent child stream; deterministic given the parent state.
    pub fn fork(&mut self) -> SeededRng {
        seeded_rng(self.next_u64())
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Standard normal draws in row-major order.
pub fn gaussian<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::of(rng.normal()))
}
