//! Seeded random streams.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`). It is counter based,
//! so independent streams are derived from one seed with [`SeededRng::fork`]
//! instead of by advancing a shared generator.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng {
        seed,
        inner: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl SeededRng {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream number `stream` of the same seed. Does not depend on
    /// how much of `self` has been consumed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    /// A generator with a fresh seed drawn from stream `stream`. Unlike
    /// [`SeededRng::fork`] the result can itself be forked without colliding
    /// with the parent's streams.
    pub fn split(&self, stream: u64) -> SeededRng {
        seeded_rng(self.fork(stream).next_u64())
    }

    pub fn gaussian(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when `lo == hi`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        if lo == hi {
            return lo;
        }
        lo + (hi - lo) * self.inner.random::<f32>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn gaussian_fill(t: &mut Tensor, mean: f32, std: f32, rng: &mut SeededRng) {
    for v in t.data_mut() {
        *v = mean + std * rng.gaussian();
    }
}

pub fn uniform_fill(t: &mut Tensor, lo: f32, hi: f32, rng: &mut SeededRng) {
    for v in t.data_mut() {
        *v = rng.uniform(lo, hi);
    }
}
