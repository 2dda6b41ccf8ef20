//! Dense linear algebra, random streams and matrix persistence.

mod io;
mod linalg;
mod matrix;
mod rng;

pub use io::{load_matrix, matrix_to_csv, read_matrix, save_matrix, write_matrix, MATRIX_MAGIC};
pub use linalg::{cholesky, cholesky_solve, qr_orthonormal, solve_spd, sym_eig, Spectrum};
pub use matrix::{dot, gemm, gram, matmul, matmul_nt, matmul_tn, norm2, Matrix, Transpose};
pub use rng::{derive_seed, gaussian, Rng, RNG_ALGORITHM};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("eigensolver did not converge")]
    NoConvergence,
    #[error("matrix is rank deficient")]
    RankDeficient,
    #[error("non-finite entries")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix too large for the binary format")]
    TooLarge,
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..12, k in 1usize..12, p in 1usize..12, q in 1usize..12) {
            let mut rng = Rng::new(seed);
            let a = gaussian(&mut rng, n, k, 1.0);
            let b = gaussian(&mut rng, k, p, 1.0);
            let c = gaussian(&mut rng, p, q, 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1e-300);
            prop_assert!(left.sub(&right).unwrap().frobenius_norm() <= 1e-6 * scale);
        }

        #[test]
        fn eig_reconstructs_random_symmetric(seed in any::<u64>(), n in 1usize..40) {
            let g = gaussian(&mut Rng::new(seed), n, n, 1.0);
            let a = g.add(&g.transpose()).unwrap();
            let s = sym_eig(&a).unwrap();
            let err = a.sub(&s.reconstruct()).unwrap().frobenius_norm();
            prop_assert!(err <= 1e-6 * a.frobenius_norm().max(1e-300));
        }

        #[test]
        fn solve_multiplies_back(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = Rng::new(seed);
            let g = gaussian(&mut rng, n, n + 5, 1.0);
            let k = gram(&g);
            let y = gaussian(&mut rng, n, 1, 1.0);
            let x = solve_spd(&k, &y, 1e-6).unwrap();
            let back = matmul(&k, &x).unwrap().add(&x.scale(1e-6)).unwrap();
            prop_assert!(back.sub(&y).unwrap().frobenius_norm() <= 1e-8 * y.frobenius_norm());
        }
    }
}
