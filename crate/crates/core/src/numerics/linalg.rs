use serde::{Deserialize, Serialize};

use super::matrix::{dot, matmul, Matrix};
use super::NumericsError;

/// Eigen-decomposition of a symmetric matrix.
///
/// Eigenvalues are sorted non-increasing; column `k` of `vectors` is the
/// unit eigenvector for `values[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Eigenvector `k` as an owned vector.
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }

    /// `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.vectors.rows();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for (j, v) in scaled.row_mut(i).iter_mut().enumerate() {
                *v *= self.values[j];
            }
        }
        super::matrix::matmul_nt(&scaled, &self.vectors).expect("square by construction")
    }

    /// Projections `⟨e_k, f⟩` of `f` onto every eigenvector.
    pub fn project(&self, f: &[f64]) -> Vec<f64> {
        let n = self.vectors.rows();
        let mut out = vec![0.0; self.values.len()];
        for i in 0..n {
            let fi = f[i];
            for (o, v) in out.iter_mut().zip(self.vectors.row(i)) {
                *o += v * fi;
            }
        }
        out
    }
}

const MAX_QL_SWEEPS: usize = 60;

/// Symmetric eigensolver: Householder tridiagonalization followed by implicit
/// QL iteration with accumulated transformations.
pub fn sym_eig(a: &Matrix) -> Result<Spectrum, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::DimensionMismatch(format!(
            "sym_eig on a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    if !a.is_symmetric(1e-8) {
        return Err(NumericsError::NotSymmetric);
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Spectrum {
            values: vec![],
            vectors: Matrix::zeros(0, 0),
        });
    }
    // `w` holds the transpose of the accumulated orthogonal transform, so every
    // inner loop below walks contiguous memory.
    let mut w = a.clone();
    w.symmetrize();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut w, &mut d, &mut e);
    ql_implicit(&mut w, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let v = w.row(src);
        // sign convention: largest-magnitude component positive
        let mut pivot = 0;
        for k in 1..n {
            if v[k].abs() > v[pivot].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, col)] = sign * v[k];
        }
    }
    Ok(Spectrum { values, vectors })
}

fn tridiagonalize(w: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    // Index helper: element V[k][j] of the textbook formulation lives at w[j][k].
    let at = |k: usize, j: usize| j * n + k;
    let ws = w.as_mut_slice();

    for j in 0..n {
        d[j] = ws[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = ws[at(i - 1, j)];
                ws[at(i, j)] = 0.0;
                ws[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                ws[at(j, i)] = f;
                g = e[j] + ws[at(j, j)] * f;
                let col = &ws[j * n..j * n + i];
                for k in (j + 1)..i {
                    g += col[k] * d[k];
                    e[k] += col[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                let col = &mut ws[j * n..j * n + i];
                for k in j..i {
                    col[k] -= f * e[k] + g * d[k];
                }
                d[j] = ws[at(i - 1, j)];
                ws[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        ws[at(n - 1, i)] = ws[at(i, i)];
        ws[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = ws[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let (lo, hi) = ws.split_at_mut((i + 1) * n);
                let next = &hi[..=i];
                let col = &mut lo[j * n..j * n + i + 1];
                let g = dot(next, col);
                for k in 0..=i {
                    col[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            ws[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = ws[at(n - 1, j)];
        ws[at(n - 1, j)] = 0.0;
    }
    ws[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(w: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<(), NumericsError> {
    let n = d.len();
    let ws = w.as_mut_slice();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > MAX_QL_SWEEPS {
                    return Err(NumericsError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = ws.split_at_mut((i + 1) * n);
                    let vi = &mut lo[i * n..];
                    let vi1 = &mut hi[..n];
                    for k in 0..n {
                        let t = vi1[k];
                        vi1[k] = s * vi[k] + c * t;
                        vi[k] = c * vi[k] - s * t;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Lower Cholesky factor `L` with `L Lᵀ = a + shift·I`.
pub fn cholesky(a: &Matrix, shift: f64) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (upper, lower) = l.as_mut_slice().split_at_mut(i * n);
            let li = &mut lower[..n];
            let s = if j == i {
                dot(&li[..j], &li[..j])
            } else {
                dot(&li[..j], &upper[j * n..j * n + j])
            };
            let mut v = a[(i, j)] - s;
            if i == j {
                v += shift;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(NumericsError::NotPositiveDefinite { pivot: i });
                }
                li[i] = v.sqrt();
            } else {
                li[j] = v / upper[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` in place for every column of `b`.
pub fn cholesky_solve(l: &Matrix, b: &mut Matrix) {
    let n = l.rows();
    let cols = b.cols();
    // forward: L z = b
    for i in 0..n {
        let li = l.row(i);
        for c in 0..cols {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= li[k] * b[(k, c)];
            }
            b[(i, c)] = s / li[i];
        }
    }
    // backward: Lᵀ x = z
    for i in (0..n).rev() {
        for c in 0..cols {
            let mut s = b[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

/// Solves `(k + ridge·I) α = y` for a symmetric positive-definite system.
///
/// One round of iterative refinement is applied after the Cholesky solve.
pub fn solve_spd(k: &Matrix, y: &Matrix, ridge: f64) -> Result<Matrix, NumericsError> {
    if !k.is_square() || k.rows() != y.rows() {
        return Err(NumericsError::DimensionMismatch(format!(
            "solve_spd: k {}x{}, y {}x{}",
            k.rows(),
            k.cols(),
            y.rows(),
            y.cols()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(NumericsError::InvalidArgument(format!("ridge {ridge} < 0")));
    }
    if !k.is_symmetric(1e-8) {
        return Err(NumericsError::NotSymmetric);
    }
    let l = cholesky(k, ridge)?;
    let mut alpha = y.clone();
    cholesky_solve(&l, &mut alpha);

    let mut residual = matmul(k, &alpha)?;
    for (r, (&yy, &a)) in residual
        .as_mut_slice()
        .iter_mut()
        .zip(y.as_slice().iter().zip(alpha.as_slice()))
    {
        *r = yy - *r - ridge * a;
    }
    cholesky_solve(&l, &mut residual);
    alpha.add_assign(&residual)?;
    Ok(alpha)
}

/// Orthonormal basis for the column span of `g` via Householder QR.
///
/// The returned `Q` has the shape of `g`; column signs are fixed so that the
/// implied `R` has a positive diagonal.
pub fn qr_orthonormal(g: &Matrix) -> Result<Matrix, NumericsError> {
    let (n, r) = g.shape();
    if n < r {
        return Err(NumericsError::DimensionMismatch(format!(
            "qr of a {n}x{r} matrix needs rows >= cols"
        )));
    }
    let col_scale = (0..r)
        .map(|j| g.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if col_scale == 0.0 {
        return Err(NumericsError::RankDeficient);
    }

    let mut a = g.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut diag = vec![0.0; r];
    for k in 0..r {
        let x: Vec<f64> = (k..n).map(|i| a[(i, k)]).collect();
        let alpha_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if alpha_norm <= 1e-12 * col_scale {
            return Err(NumericsError::RankDeficient);
        }
        let alpha = if x[0] > 0.0 { -alpha_norm } else { alpha_norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        v.iter_mut().for_each(|t| *t /= vnorm);
        for j in k..r {
            let s: f64 = (k..n).map(|i| v[i - k] * a[(i, j)]).sum();
            for i in k..n {
                a[(i, j)] -= 2.0 * s * v[i - k];
            }
        }
        diag[k] = a[(k, k)];
        reflectors.push(v);
    }

    let mut q = Matrix::zeros(n, r);
    for j in 0..r {
        q[(j, j)] = 1.0;
    }
    for k in (0..r).rev() {
        let v = &reflectors[k];
        for j in 0..r {
            let s: f64 = (k..n).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..n {
                q[(i, j)] -= 2.0 * s * v[i - k];
            }
        }
    }
    for (j, &dj) in diag.iter().enumerate() {
        if dj < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::matmul_tn;
    use crate::numerics::{gaussian, Rng};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn diagonal_eigenvalues_sorted_descending() {
        let s = sym_eig(&Matrix::diag(&[2.0, 5.0])).unwrap();
        assert_eq!(s.values, vec![5.0, 2.0]);
    }

    #[test]
    fn swap_matrix_spectrum() {
        let s = sym_eig(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert_close(s.values[0], 1.0, 1e-14);
        assert_close(s.values[1], -1.0, 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = s.vector(0);
        let v1 = s.vector(1);
        assert_close(v0[0], h, 1e-14);
        assert_close(v0[1], h, 1e-14);
        assert_close(v1[0], h, 1e-14);
        assert_close(v1[1], -h, 1e-14);
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let s = sym_eig(&Matrix::identity(6)).unwrap();
        assert!(s.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rejects_non_symmetric() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(NumericsError::NotSymmetric)));
    }

    #[test]
    fn reconstruction_and_orthonormality_on_random_symmetric() {
        let mut rng = Rng::new(11);
        for &n in &[1usize, 2, 3, 17, 64, 200] {
            let g = gaussian(&mut rng, n, n, 1.0);
            let mut a = g.add(&g.transpose()).unwrap();
            a.symmetrize();
            let s = sym_eig(&a).unwrap();
            let err = a.sub(&s.reconstruct()).unwrap().frobenius_norm();
            assert!(err <= 1e-6 * a.frobenius_norm(), "n={n} err={err}");
            let vtv = matmul_tn(&s.vectors, &s.vectors).unwrap();
            let dev = vtv.sub(&Matrix::identity(n)).unwrap().max_abs();
            assert!(dev < 1e-8, "n={n} dev={dev}");
            assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn solve_identity() {
        let b = Matrix::column_vector(&[1.0, -2.0, 3.0]);
        assert_eq!(solve_spd(&Matrix::identity(3), &b, 0.0).unwrap(), b);
    }

    #[test]
    fn solve_scalar() {
        let x = solve_spd(&Matrix::diag(&[2.0]), &Matrix::column_vector(&[4.0]), 0.0).unwrap();
        assert_close(x[(0, 0)], 2.0, 1e-15);
    }

    #[test]
    fn solve_two_by_two() {
        let k = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let x = solve_spd(&k, &Matrix::column_vector(&[1.0, 1.0]), 0.0).unwrap();
        assert_close(x[(0, 0)], 1.0 / 3.0, 1e-15);
        assert_close(x[(1, 0)], 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn solve_rejects_indefinite() {
        let k = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        let r = solve_spd(&k, &Matrix::column_vector(&[1.0, 1.0]), 0.0);
        assert!(matches!(r, Err(NumericsError::NotPositiveDefinite { .. })));
        // enough ridge makes it definite
        assert!(solve_spd(&k, &Matrix::column_vector(&[1.0, 1.0]), 1.5).is_ok());
    }

    #[test]
    fn solve_residual_is_small() {
        let mut rng = Rng::new(5);
        let g = gaussian(&mut rng, 80, 120, 1.0);
        let k = crate::numerics::gram(&g);
        let y = gaussian(&mut rng, 80, 2, 1.0);
        let ridge = 1e-3;
        let x = solve_spd(&k, &y, ridge).unwrap();
        let back = matmul(&k, &x).unwrap().add(&x.scale(ridge)).unwrap();
        let rel = back.sub(&y).unwrap().frobenius_norm() / y.frobenius_norm();
        assert!(rel <= 1e-8, "rel={rel}");
    }

    #[test]
    fn qr_of_identity_and_axes() {
        assert_eq!(
            qr_orthonormal(&Matrix::identity(3)).unwrap(),
            Matrix::identity(3)
        );
        let q = qr_orthonormal(&Matrix::diag(&[2.0, 3.0])).unwrap();
        assert_eq!(q, Matrix::identity(2));
    }

    #[test]
    fn qr_random_tall_matrix_is_orthonormal_and_spans() {
        let mut rng = Rng::new(3);
        let g = gaussian(&mut rng, 20, 3, 1.0);
        let q = qr_orthonormal(&g).unwrap();
        let qtq = matmul_tn(&q, &q).unwrap();
        assert!(qtq.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-8);
        // projecting g onto span(Q) leaves it unchanged
        let proj = matmul(&q, &matmul_tn(&q, &g).unwrap()).unwrap();
        assert!(proj.sub(&g).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn qr_rank_deficient() {
        let g = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        assert!(matches!(
            qr_orthonormal(&g),
            Err(NumericsError::RankDeficient)
        ));
    }
}
