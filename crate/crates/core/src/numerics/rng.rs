use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;

/// Name of the generator, recorded in run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.3), seed_from_u64 + 64-bit stream id";

/// Seeded ChaCha20 stream.
///
/// `Rng::stream(seed, id)` selects one of 2^64 independent counter streams of
/// the same key, which is how generators obtain disjoint train/test draws.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn sign(&mut self) -> f64 {
        if self.inner.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

/// Derives a child seed from a parent seed and a label, so that independent
/// components of one run (data, init, batching) never share a stream.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// i.i.d. `N(0, std²)` matrix, filled row-major from `rng`.
pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    assert!(std >= 0.0, "negative standard deviation");
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_zero_matrix() {
        let mut rng = Rng::new(1);
        assert_eq!(gaussian(&mut rng, 3, 4, 0.0), Matrix::zeros(3, 4));
    }

    #[test]
    fn same_seed_same_draws() {
        let a = gaussian(&mut Rng::new(42), 5, 5, 1.0);
        let b = gaussian(&mut Rng::new(42), 5, 5, 1.0);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn distinct_seeds_and_streams_disagree() {
        let a = gaussian(&mut Rng::new(1), 1, 8, 1.0);
        let b = gaussian(&mut Rng::new(2), 1, 8, 1.0);
        let c = gaussian(&mut Rng::stream(1, 1), 1, 8, 1.0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unit_variance_within_three_standard_errors() {
        let n = 100_000;
        let g = gaussian(&mut Rng::new(7), 1, n, 1.0);
        let mean = g.as_slice().iter().sum::<f64>() / n as f64;
        let var = g.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // standard error of the sample variance for a normal is sqrt(2/(n-1))·σ²
        let se = (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var={var}");
    }

    #[test]
    fn permutation_is_bijection() {
        let mut p = Rng::new(9).permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
