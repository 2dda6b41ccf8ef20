//! Fixtures shared by the benchmarks.

use flgap::network::{init, NetworkConfig};
use flgap::numerics::{gaussian, Rng};
use flgap::{Matrix, ModelState};

/// μP ReLU network with `d` inputs and a scalar output.
pub fn network(d: usize, width: usize, hidden_layers: usize) -> ModelState {
    init(&NetworkConfig::mlp(d, width, hidden_layers, 1), 0).expect("valid fixture config")
}

/// `rows × cols` standard Gaussian matrix.
pub fn inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian(&mut Rng::new(seed), rows, cols, 1.0)
}

/// Symmetric PSD matrix `A Aᵀ / n`.
pub fn psd(n: usize, seed: u64) -> Matrix {
    let a = inputs(n, n, seed);
    flgap::numerics::gram(&a).scale(1.0 / n as f64)
}
