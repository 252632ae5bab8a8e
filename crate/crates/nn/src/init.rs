use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic parameter initializer.
pub struct SeededInit {
    rng: ChaCha8Rng,
}

impl SeededInit {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`.
    pub fn fan_in_uniform<T: Real>(&mut self, n: usize, fan_in: usize) -> Vec<T> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        (0..n).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect()
    }
}
