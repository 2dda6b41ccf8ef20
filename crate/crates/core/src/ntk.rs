//! Empirical tangent kernels, kernel regression, linearized training, CKA
//! and the kernel/network generalization gap.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::Dataset;
use crate::network::{self, tangent_factors, LayerTangent, ModelState, NetworkError};
use crate::numerics::{self, gemm, solve_spd, sym_eig, Matrix, NumericsError, Spectrum, Transpose};
use crate::training::Predictor;

/// Largest number of samples per kernel block.
pub const BLOCK: usize = 256;

/// Default cap on the number of probe rows used for kernel alignment.
pub const PROBE_CAP: usize = 2000;

#[derive(Debug, thiserror::Error)]
pub enum NtkError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("linearized training diverged after {0} iterations")]
    Diverged(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("kernel io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    /// Hash of the parameters the kernel was evaluated at.
    pub checkpoint_id: String,
    pub param_order: String,
    /// Identity of the row samples.
    pub left: String,
    /// Identity of the column samples.
    pub right: String,
    pub ridge: Option<f64>,
    pub probe_seed: Option<u64>,
    pub probe_cap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub entries: Matrix,
    pub meta: KernelMeta,
}

impl KernelMatrix {
    pub fn new(entries: Matrix) -> Self {
        Self {
            entries,
            meta: KernelMeta::default(),
        }
    }

    pub fn rows(&self) -> usize {
        self.entries.rows()
    }

    pub fn cols(&self) -> usize {
        self.entries.cols()
    }

    pub fn is_square(&self) -> bool {
        self.entries.is_square()
    }

    /// Symmetric to `1e-8` and minimum eigenvalue at least
    /// `-1e-8 · trace / m`.
    pub fn check_psd(&self) -> Result<(), NtkError> {
        if !self.is_square() {
            return Err(NtkError::Shape("kernel is not square".into()));
        }
        if !self.entries.is_symmetric(1e-8) {
            return Err(NumericsError::NotSymmetric.into());
        }
        let m = self.rows();
        if m == 0 {
            return Ok(());
        }
        let spec = sym_eig(&self.entries)?;
        let min = spec.values.last().copied().unwrap_or(0.0);
        if min < -1e-8 * self.entries.trace().abs() / m as f64 {
            return Err(NtkError::InvalidArgument(format!(
                "kernel not PSD (min eigenvalue {min:e})"
            )));
        }
        Ok(())
    }
}

/// Short SHA-256 digest of the flattened parameters.
pub fn checkpoint_id(state: &ModelState) -> String {
    let mut h = Sha256::new();
    for v in state.flat_params() {
        h.update(v.to_le_bytes());
    }
    h.update(state.config.gamma.to_le_bytes());
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// SHA-256 prefix of a sample matrix, used to identify kernel rows/columns.
pub fn sample_id(x: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((x.rows() as u64).to_le_bytes());
    h.update((x.cols() as u64).to_le_bytes());
    for v in x.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn factors_blocked(state: &ModelState, x: &Matrix) -> Result<Vec<Vec<LayerTangent>>, NtkError> {
    (0..x.rows())
        .step_by(BLOCK)
        .map(|s| {
            let e = (s + BLOCK).min(x.rows());
            Ok(tangent_factors(state, &x.row_range(s, e))?)
        })
        .collect()
}

/// `Σ_l (Δ_a Δ_bᵀ) ∘ (A_a A_bᵀ + 1)` for one pair of blocks.
fn block_kernel(a: &[LayerTangent], b: &[LayerTangent]) -> Matrix {
    let (ra, rb) = (a[0].input.rows(), b[0].input.rows());
    let mut out = Matrix::zeros(ra, rb);
    let mut dd = Matrix::zeros(ra, rb);
    let mut aa = Matrix::zeros(ra, rb);
    for (la, lb) in a.iter().zip(b) {
        gemm(
            1.0,
            &la.delta,
            Transpose::No,
            &lb.delta,
            Transpose::Yes,
            0.0,
            &mut dd,
        )
        .expect("block shapes agree");
        gemm(
            1.0,
            &la.input,
            Transpose::No,
            &lb.input,
            Transpose::Yes,
            0.0,
            &mut aa,
        )
        .expect("block shapes agree");
        for ((o, d), a) in out
            .as_mut_slice()
            .iter_mut()
            .zip(dd.as_slice())
            .zip(aa.as_slice())
        {
            *o += d * (a + 1.0);
        }
    }
    out
}

/// Empirical tangent kernel of `f/γ` between the rows of `xa` and `xb`,
/// summed over output units. Assembled from per-layer factors in blocks of
/// at most [`BLOCK`] samples; the full Jacobian is never formed.
pub fn empirical_ntk(
    state: &ModelState,
    xa: &Matrix,
    xb: &Matrix,
) -> Result<KernelMatrix, NtkError> {
    let n0 = state.config.input_dim;
    if xa.cols() != n0 || xb.cols() != n0 {
        return Err(NtkError::Shape(format!(
            "inputs have {} and {} columns, network expects {n0}",
            xa.cols(),
            xb.cols()
        )));
    }
    let square = xa == xb;
    let fa = factors_blocked(state, xa)?;
    let fb = if square {
        None
    } else {
        Some(factors_blocked(state, xb)?)
    };
    let fb_ref = fb.as_ref().unwrap_or(&fa);

    let pairs: Vec<(usize, usize)> = (0..fa.len())
        .flat_map(|i| {
            let start = if square { i } else { 0 };
            (start..fb_ref.len()).map(move |j| (i, j))
        })
        .collect();
    let blocks: Vec<Matrix> = pairs
        .par_iter()
        .map(|&(i, j)| block_kernel(&fa[i], &fb_ref[j]))
        .collect();

    let mut k = Matrix::zeros(xa.rows(), xb.rows());
    for (&(i, j), blk) in pairs.iter().zip(&blocks) {
        for r in 0..blk.rows() {
            let row = i * BLOCK + r;
            k.row_mut(row)[j * BLOCK..j * BLOCK + blk.cols()].copy_from_slice(blk.row(r));
        }
        if square && i != j {
            for r in 0..blk.rows() {
                for c in 0..blk.cols() {
                    k[(j * BLOCK + c, i * BLOCK + r)] = blk[(r, c)];
                }
            }
        }
    }
    if square {
        k.symmetrize();
    }
    let left = sample_id(xa);
    let right = if square { left.clone() } else { sample_id(xb) };
    Ok(KernelMatrix {
        entries: k,
        meta: KernelMeta {
            checkpoint_id: checkpoint_id(state),
            param_order: "layer-major; per layer W row-major then b".into(),
            left,
            right,
            ..KernelMeta::default()
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RidgeRule {
    /// `λ = c · tr(K) / m`.
    TraceScaled(f64),
    Fixed(f64),
    None,
}

impl Default for RidgeRule {
    fn default() -> Self {
        RidgeRule::TraceScaled(1e-6)
    }
}

impl RidgeRule {
    pub fn value(self, k: &Matrix) -> f64 {
        match self {
            RidgeRule::TraceScaled(c) => c * k.trace() / k.rows().max(1) as f64,
            RidgeRule::Fixed(l) => l,
            RidgeRule::None => 0.0,
        }
    }
}

/// Kernel-regression mean predictor `K_*X (K_XX + λI)^{-1} Y`.
pub fn ntk_predict(
    k_train: &KernelMatrix,
    y: &Matrix,
    k_test_train: &KernelMatrix,
    ridge: RidgeRule,
) -> Result<Matrix, NtkError> {
    if !k_train.is_square() || k_train.rows() != y.rows() || k_test_train.cols() != y.rows() {
        return Err(NtkError::Shape(format!(
            "K_train {:?}, Y {:?}, K_test_train {:?}",
            k_train.entries.shape(),
            y.shape(),
            k_test_train.entries.shape()
        )));
    }
    let lambda = ridge.value(&k_train.entries);
    let alpha = solve_spd(&k_train.entries, y, lambda)?;
    Ok(numerics::matmul(&k_test_train.entries, &alpha)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Full-batch gradient descent.
    GradientDescent,
    /// Conjugate gradients on the normal equations (CGLS). Reaches the same
    /// minimum-norm solution in far fewer steps on ill-conditioned kernels.
    #[default]
    ConjugateGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizedConfig {
    /// Maximum number of full-batch steps.
    pub max_iters: usize,
    /// Gradient-descent step size; defaults to `1/λ_max` of the loss Hessian.
    pub lr: Option<f64>,
    /// Stop once the gradient norm falls below `tol` times its initial value.
    pub tol: f64,
    pub solver: LinearSolver,
}

impl Default for LinearizedConfig {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            lr: None,
            tol: 1e-10,
            solver: LinearSolver::default(),
        }
    }
}

/// `f_{θ₀}(x) + J_{θ₀}(x) (θ − θ₀)`.
#[derive(Clone, Debug)]
pub struct LinearizedPredictor {
    pub state0: ModelState,
    pub delta: Vec<f64>,
    pub iterations: usize,
    pub final_train_loss: f64,
}

impl LinearizedPredictor {
    pub fn predict(&self, x: &Matrix) -> Result<Matrix, NtkError> {
        let mut out = network::predict(&self.state0, x)?;
        for i in 0..x.rows() {
            let jac = network::param_jacobian(&self.state0, x.row(i))?;
            for o in 0..jac.rows() {
                out[(i, o)] += numerics::dot(jac.row(o), &self.delta);
            }
        }
        Ok(out)
    }
}

impl Predictor for LinearizedPredictor {
    fn predict(&self, x: &Matrix) -> Result<Matrix, crate::Error> {
        LinearizedPredictor::predict(self, x).map_err(|e| crate::Error::Other(e.to_string()))
    }
}

/// Fits the MSE of the linearized model, moving only `θ − θ₀` against the
/// frozen Jacobian at `θ₀`. Both solvers start from zero and stay in the row
/// space of the Jacobian, so they converge to the minimum-norm interpolant.
pub fn linearize_and_train(
    state0: &ModelState,
    ds: &Dataset,
    cfg: &LinearizedConfig,
) -> Result<LinearizedPredictor, NtkError> {
    let m = ds.len();
    let n_out = state0.config.output_dim;
    let p = state0.param_count();
    let f0 = network::predict(state0, &ds.x)?;
    // rows ordered (sample, output)
    let mut jac = Matrix::zeros(m * n_out, p);
    for i in 0..m {
        let ji = network::param_jacobian(state0, ds.x.row(i))?;
        for o in 0..n_out {
            jac.row_mut(i * n_out + o).copy_from_slice(ji.row(o));
        }
    }
    let target: Vec<f64> =
        ds.y.as_slice()
            .iter()
            .zip(f0.as_slice())
            .map(|(y, f)| y - f)
            .collect();
    let scale = 2.0 / (m * n_out).max(1) as f64;
    let rows = m * n_out;
    let apply = |v: &[f64], out: &mut [f64]| {
        for (k, o) in out.iter_mut().enumerate() {
            *o = numerics::dot(jac.row(k), v);
        }
    };
    let apply_t = |r: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|g| *g = 0.0);
        for (k, rk) in r.iter().enumerate() {
            for (g, j) in out.iter_mut().zip(jac.row(k)) {
                *g += rk * j;
            }
        }
    };

    let mut delta = vec![0.0; p];
    let mut resid = vec![0.0; rows];
    let mut iters = 0;
    match cfg.solver {
        LinearSolver::GradientDescent => {
            let lr = match cfg.lr {
                Some(lr) => lr,
                None => {
                    let k = numerics::gram(&jac);
                    let lmax = sym_eig(&k)?.values.first().copied().unwrap_or(0.0);
                    if lmax > 0.0 {
                        1.0 / (scale * lmax)
                    } else {
                        1.0
                    }
                }
            };
            let mut grad = vec![0.0; p];
            let mut g0 = None;
            while iters < cfg.max_iters {
                apply(&delta, &mut resid);
                for (r, t) in resid.iter_mut().zip(&target) {
                    *r -= t;
                }
                apply_t(&resid, &mut grad);
                grad.iter_mut().for_each(|g| *g *= scale);
                let gn = numerics::norm2(&grad);
                if !gn.is_finite() {
                    return Err(NtkError::Diverged(iters));
                }
                let g0v = *g0.get_or_insert(gn);
                if gn <= cfg.tol * g0v || gn == 0.0 {
                    break;
                }
                for (d, g) in delta.iter_mut().zip(&grad) {
                    *d -= lr * g;
                }
                iters += 1;
            }
        }
        LinearSolver::ConjugateGradient => {
            // r = t − Jδ, s = Jᵀr (the negative gradient up to `scale`)
            let mut r = target.clone();
            let mut s = vec![0.0; p];
            apply_t(&r, &mut s);
            let mut dir = s.clone();
            let mut q = vec![0.0; rows];
            let mut gamma = numerics::dot(&s, &s);
            let stop = cfg.tol * gamma.sqrt();
            while iters < cfg.max_iters && gamma.sqrt() > stop && gamma > 0.0 {
                apply(&dir, &mut q);
                let qq = numerics::dot(&q, &q);
                if qq == 0.0 {
                    break;
                }
                let alpha = gamma / qq;
                for (d, v) in delta.iter_mut().zip(&dir) {
                    *d += alpha * v;
                }
                for (ri, qi) in r.iter_mut().zip(&q) {
                    *ri -= alpha * qi;
                }
                apply_t(&r, &mut s);
                let next = numerics::dot(&s, &s);
                if !next.is_finite() {
                    return Err(NtkError::Diverged(iters));
                }
                let beta = next / gamma;
                for (v, si) in dir.iter_mut().zip(&s) {
                    *v = si + beta * *v;
                }
                gamma = next;
                iters += 1;
            }
        }
    }
    apply(&delta, &mut resid);
    for (r, t) in resid.iter_mut().zip(&target) {
        *r -= t;
    }
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / (m * n_out).max(1) as f64;
    Ok(LinearizedPredictor {
        state0: state0.clone(),
        delta,
        iterations: iters,
        final_train_loss: loss,
    })
}

/// Eigenmode projections of the residual at time `t` under `dr/dt = −K r`,
/// started from the zero function (`r₀ = −Y`): row `ρ` holds
/// `e^{−λ_ρ t} ⟨r₀, e_ρ⟩` for every output column. Negative eigenvalues from
/// roundoff are treated as zero.
pub fn kernel_gradient_flow(
    k: &KernelMatrix,
    y: &Matrix,
    t: f64,
    spectrum: Option<&Spectrum>,
) -> Result<Matrix, NtkError> {
    if !k.is_square() || k.rows() != y.rows() {
        return Err(NtkError::Shape("kernel and labels disagree".into()));
    }
    if !(t >= 0.0) {
        return Err(NtkError::InvalidArgument("t must be >= 0".into()));
    }
    let owned;
    let spec = match spectrum {
        Some(s) => s,
        None => {
            owned = sym_eig(&k.entries)?;
            &owned
        }
    };
    let m = y.rows();
    let mut out = Matrix::zeros(spec.len(), y.cols());
    for c in 0..y.cols() {
        let r0: Vec<f64> = y.column(c).iter().map(|v| -v).collect();
        let proj = spec.project(&r0);
        for (rho, p) in proj.iter().enumerate() {
            let lambda = spec.values[rho].max(0.0);
            out[(rho, c)] = (-lambda * t).exp() * p;
        }
    }
    debug_assert_eq!(spec.vectors.rows(), m);
    Ok(out)
}

/// Residual in sample space reconstructed from mode projections.
pub fn residual_from_projections(spectrum: &Spectrum, proj: &Matrix) -> Matrix {
    numerics::matmul(&spectrum.vectors, proj).expect("projection rows match modes")
}

fn double_center(k: &Matrix) -> Matrix {
    let m = k.rows();
    let n = m.max(1) as f64;
    let row_means: Vec<f64> = (0..m).map(|i| k.row(i).iter().sum::<f64>() / n).collect();
    let col_means: Vec<f64> = k.column_sums().iter().map(|s| s / n).collect();
    let grand = row_means.iter().sum::<f64>() / n;
    Matrix::from_fn(m, m, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand)
}

/// Linear centered kernel alignment; 0 when either centered Gram vanishes.
pub fn cka(k1: &KernelMatrix, k2: &KernelMatrix) -> Result<f64, NtkError> {
    cka_matrices(&k1.entries, &k2.entries)
}

pub fn cka_matrices(k1: &Matrix, k2: &Matrix) -> Result<f64, NtkError> {
    if !k1.is_square() || k1.shape() != k2.shape() {
        return Err(NtkError::Shape(format!(
            "{:?} vs {:?}",
            k1.shape(),
            k2.shape()
        )));
    }
    let c1 = double_center(k1);
    let c2 = double_center(k2);
    let n1 = c1.frobenius_norm();
    let n2 = c2.frobenius_norm();
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(0.0);
    }
    let v = c1.frobenius_dot(&c2) / (n1 * n2);
    Ok(v.clamp(0.0, 1.0))
}

/// `1 − CKA` between the tangent kernels of two parameter states on the
/// probe inputs.
pub fn fl_strength_ntk(
    state0: &ModelState,
    state_t: &ModelState,
    x_probe: &Matrix,
) -> Result<f64, NtkError> {
    if state0.config.layer_dims() != state_t.config.layer_dims() {
        return Err(NtkError::Shape("architectures differ".into()));
    }
    let k0 = empirical_ntk(state0, x_probe, x_probe)?;
    let kt = empirical_ntk(state_t, x_probe, x_probe)?;
    Ok(1.0 - cka(&k0, &kt)?)
}

/// At most `cap` rows of `x`, drawn without replacement with `seed`.
pub fn probe_rows(x: &Matrix, cap: usize, seed: u64) -> Matrix {
    if x.rows() <= cap {
        return x.clone();
    }
    let mut idx = numerics::Rng::new(seed).permutation(x.rows());
    idx.truncate(cap);
    idx.sort_unstable();
    x.select_rows(&idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlGapResult {
    pub m: usize,
    pub nn_error: f64,
    pub ntk_error: f64,
    pub gap: f64,
}

/// `ntk_error − nn_error`.
pub fn fl_gap(m: usize, nn_error: f64, ntk_error: f64) -> Result<FlGapResult, NtkError> {
    if !(nn_error >= 0.0) || !(ntk_error >= 0.0) {
        return Err(NtkError::InvalidArgument(
            "errors must be non-negative".into(),
        ));
    }
    Ok(FlGapResult {
        m,
        nn_error,
        ntk_error,
        gap: ntk_error - nn_error,
    })
}

/// Smallest grid size from which `nn/ntk < eps` holds at every later grid
/// point.
pub fn critical_m(
    grid: &[usize],
    nn: &[f64],
    ntk: &[f64],
    eps: f64,
) -> Result<Option<usize>, NtkError> {
    if grid.len() != nn.len() || grid.len() != ntk.len() {
        return Err(NtkError::Shape("curves sampled on different grids".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(NtkError::InvalidArgument("eps must lie in (0, 1)".into()));
    }
    let mut found = None;
    for i in (0..grid.len()).rev() {
        let ratio = nn[i] / ntk[i];
        if ratio < eps {
            found = Some(grid[i]);
        } else {
            break;
        }
    }
    Ok(found)
}

/// Writes `K.bin` and `meta.toml` into `dir`.
pub fn save_kernel(dir: impl AsRef<Path>, k: &KernelMatrix) -> Result<(), NtkError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| NtkError::Io(e.to_string()))?;
    numerics::save_matrix(dir.join("K.bin"), &k.entries)?;
    let meta = toml::to_string(&k.meta).map_err(|e| NtkError::Io(e.to_string()))?;
    std::fs::write(dir.join("meta.toml"), meta).map_err(|e| NtkError::Io(e.to_string()))
}

pub fn load_kernel(dir: impl AsRef<Path>) -> Result<KernelMatrix, NtkError> {
    let dir = dir.as_ref();
    let entries = numerics::load_matrix(dir.join("K.bin"))?;
    let text =
        std::fs::read_to_string(dir.join("meta.toml")).map_err(|e| NtkError::Io(e.to_string()))?;
    let meta = toml::from_str(&text).map_err(|e| NtkError::Io(e.to_string()))?;
    Ok(KernelMatrix { entries, meta })
}
