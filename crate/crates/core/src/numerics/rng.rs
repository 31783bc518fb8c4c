use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Matrix, Scalar};

/// Seeded generator: ChaCha8 keyed by the 64-bit seed, one independent
/// stream per [`Rng::split`] index. Draws are identical on every platform.
#[derive(Clone, Debug)]
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

    /// A fresh generator on stream `stream` of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.inner.gen::<f64>();
        let u2 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn uniform_vec<T: Scalar>(&mut self, n: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..n).map(|_| T::lit(self.uniform(lo, hi))).collect()
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::lit(self.uniform(lo, hi)))
    }

    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::lit(self.normal()))
    }

    /// Projection weight of shape `fan_in x fan_out`, uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_weight<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Matrix<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform_matrix(fan_in, fan_out, -bound, bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_fill() {
        let a = Rng::new(42).uniform_matrix::<f64>(5, 4, -1.0, 1.0);
        let b = Rng::new(42).uniform_matrix::<f64>(5, 4, -1.0, 1.0);
        assert_eq!(a, b);
        let c = Rng::new(43).uniform_matrix::<f64>(5, 4, -1.0, 1.0);
        assert_ne!(a, c);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let root = Rng::new(7);
        let mut s1 = root.split(1);
        let mut s2 = root.split(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
        assert_eq!(root.split(1).next_u64(), Rng::new(7).split(1).next_u64());
    }

    #[test]
    fn init_weight_bound() {
        let w = Rng::new(1).init_weight::<f64>(16, 8);
        assert!(w.as_slice().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn f32_and_f64_draw_the_same_values() {
        let a = Rng::new(5).uniform_matrix::<f64>(2, 2, 0.0, 1.0);
        let b = Rng::new(5).uniform_matrix::<f32>(2, 2, 0.0, 1.0);
        assert!(a.cast::<f32>() == b);
    }
}
