//! Seeded, splittable random source.
//!
//! Backed by ChaCha8, a counter-based generator whose output is specified
//! independently of platform. `split` derives child streams by selecting a
//! distinct ChaCha stream under the same key, so children never overlap with
//! each other or with the parent.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
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

    /// Independent child generator for the given stream label. The result
    /// depends only on `(seed, label)`, not on how much of the parent stream
    /// has been consumed.
    pub fn split(&self, label: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        // stream 0 is the parent's
        inner.set_stream(label.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn split_is_independent_of_parent_position() {
        let parent = Rng::new(3);
        let mut used = Rng::new(3);
        for _ in 0..17 {
            used.uniform(0.0, 1.0);
        }
        let mut c1 = parent.split(5);
        let mut c2 = used.split(5);
        assert_eq!(c1.uniform(0.0, 1.0), c2.uniform(0.0, 1.0));
        let mut other = parent.split(6);
        let mut c3 = parent.split(5);
        assert_ne!(other.uniform(0.0, 1.0), c3.uniform(0.0, 1.0));
    }

    #[test]
    fn uniform_in_range() {
        let mut r = Rng::new(0);
        for _ in 0..1000 {
            let u = r.uniform(-1.0, 2.0);
            assert!((-1.0..2.0).contains(&u));
            assert!(r.below(3) < 3);
        }
    }
}
