use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::NdArray;
use crate::error::{Error, Result};

/// Name of the generator backing [`Rng`]; recorded in run summaries.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded, platform-independent random source.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, stream)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// Child generator; advances `self` by one draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. standard normal array.
pub fn sample_standard_normal(shape: &[usize], rng: &mut Rng) -> Result<NdArray> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "normal sample shape {shape:?} must be non-empty with positive extents"
        )));
    }
    let n = shape.iter().product();
    NdArray::from_vec(shape, rng.normals(n))
}
