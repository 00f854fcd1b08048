//! Named, independently seeded random streams.
//!
//! Every consumer of randomness owns its own [`RngStream`], keyed by a
//! master seed, a [`StreamKind`] and an index. Changing how many draws one
//! consumer makes never shifts the draws of another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamKind {
    BatchOrder = 1,
    Transform = 2,
    Noise = 3,
    Dropout = 4,
    Augment = 5,
    Init = 6,
    Generate = 7,
    Split = 8,
    /// Free for tests and diagnostics.
    Scratch = 9,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, kind: StreamKind) -> Self {
        Self::indexed(seed, kind, 0)
    }

    /// Stream for item `index` of a family, e.g. one per generated image.
    pub fn indexed(seed: u64, kind: StreamKind, index: u32) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(((kind as u64) << 32) | index as u64);
        RngStream { inner }
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
