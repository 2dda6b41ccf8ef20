//! Conjugate kernels, eigen-utilities of the learned function and the
//! cumulative power of a target under a kernel.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::network::{self, ModelState, NetworkError};
use crate::ntk::KernelMatrix;
use crate::numerics::{self, sym_eig, Matrix, NumericsError, Spectrum};

/// Default threshold on the cumulative utility.
pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Modes with eigenvalue at most this fraction of the trace are dropped.
pub const RANK_CUTOFF: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum CkError {
    #[error("function has no component in the retained eigenspace")]
    Degenerate,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel has zero trace")]
    ZeroPower,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `h^l` as returned by [`network::feature_map`].
    #[default]
    PreActivation,
    /// `φ(h^l)`, what the next layer consumes.
    PostActivation,
}

fn features(
    state: &ModelState,
    x: &Matrix,
    layer: usize,
    kind: FeatureKind,
) -> Result<Matrix, NetworkError> {
    match kind {
        FeatureKind::PreActivation => network::feature_map(state, x, layer),
        FeatureKind::PostActivation => network::activation_map(state, x, layer),
    }
}

/// Gram of the layer-`l` pre-activation feature map over the rows of `x`.
pub fn ck_matrix(state: &ModelState, x: &Matrix, layer: usize) -> Result<KernelMatrix, CkError> {
    ck_matrix_with(state, x, layer, FeatureKind::PreActivation)
}

pub fn ck_matrix_with(
    state: &ModelState,
    x: &Matrix,
    layer: usize,
    kind: FeatureKind,
) -> Result<KernelMatrix, CkError> {
    let phi = features(state, x, layer, kind)?;
    Ok(KernelMatrix::new(numerics::gram(&phi)))
}

/// Non-negligible eigenpairs of `Φ Φᵀ`, computed through the smaller of the
/// two Grams `Φ Φᵀ` and `Φᵀ Φ`.
pub fn feature_spectrum(phi: &Matrix) -> Result<Spectrum, CkError> {
    let (m, n) = phi.shape();
    let spec = if n < m {
        let small = numerics::matmul_tn(phi, phi)?;
        let inner = sym_eig(&small)?;
        let keep = retained(&inner.values);
        let mut vectors = Matrix::zeros(m, keep);
        for k in 0..keep {
            let v = numerics::matmul(phi, &Matrix::column_vector(&inner.vector(k)))?;
            let norm = numerics::norm2(v.as_slice());
            let mut col: Vec<f64> = v.as_slice().iter().map(|x| x / norm).collect();
            orient(&mut col);
            vectors.set_column(k, &col);
        }
        Spectrum {
            values: inner.values[..keep].to_vec(),
            vectors,
        }
    } else {
        truncate(sym_eig(&numerics::gram(phi))?)
    };
    Ok(spec)
}

fn retained(values: &[f64]) -> usize {
    let trace: f64 = values.iter().filter(|v| **v > 0.0).sum();
    values
        .iter()
        .take_while(|&&v| v > RANK_CUTOFF * trace && v > 0.0)
        .count()
}

/// Largest-magnitude component positive, matching the eigensolver.
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Drops modes with eigenvalue at most `RANK_CUTOFF · trace`.
pub fn truncate(spec: Spectrum) -> Spectrum {
    let keep = retained(&spec.values);
    let m = spec.vectors.rows();
    let vectors = Matrix::from_fn(m, keep, |i, k| spec.vectors[(i, k)]);
    Spectrum {
        values: spec.values[..keep].to_vec(),
        vectors,
    }
}

/// Spectrum of the conjugate kernel of the representation the readout
/// consumes.
pub fn readout_spectrum(state: &ModelState, x: &Matrix) -> Result<Spectrum, CkError> {
    feature_spectrum(&network::readout_features(state, x)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityProfile {
    /// Eigenvalue of each mode, in the order of `utilities`.
    pub eigenvalues: Vec<f64>,
    /// `Q̂_k`.
    pub utilities: Vec<f64>,
    /// `Π̂(k)`, `k = 1..`.
    pub cumulative: Vec<f64>,
    pub threshold: f64,
    /// Smallest `k` with `Π̂(k) > threshold`.
    pub strength: usize,
    /// `Σ_k ⟨e_k, f⟩² / ‖f‖²`: the share of `f` inside the retained span.
    pub projected_fraction: f64,
}

impl UtilityProfile {
    /// Profile from raw (unnormalized) non-negative utilities.
    pub fn from_raw(raw: &[f64], threshold: f64) -> Result<Self, CkError> {
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(CkError::Degenerate);
        }
        let utilities = raw.iter().map(|q| q / total).collect();
        let mut acc = 0.0;
        let cumulative: Vec<f64> = raw
            .iter()
            .map(|q| {
                acc += q;
                acc / total
            })
            .collect();
        let mut profile = Self {
            eigenvalues: vec![],
            utilities,
            cumulative,
            threshold,
            strength: 0,
            projected_fraction: 1.0,
        };
        profile.strength = profile.strength_at(threshold);
        Ok(profile)
    }

    /// Smallest `k` (1-based) with `Π̂(k) > eps`; the number of modes when
    /// `eps ≥ 1`.
    pub fn strength_at(&self, eps: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| c > eps)
            .map_or(self.cumulative.len(), |k| k + 1)
    }
}

/// `q_k = ⟨e_k, f⟩²` over the modes of `spectrum`, normalized to sum to
/// one. Modes with equal eigenvalues (to `1e-12` relative) are ordered by
/// decreasing `q_k`, then by index.
pub fn feature_utilities(spectrum: &Spectrum, f_values: &[f64]) -> Result<UtilityProfile, CkError> {
    utilities_with_threshold(spectrum, f_values, DEFAULT_THRESHOLD)
}

/// Same computation as [`feature_utilities`] with the target in place of
/// the learned function.
pub fn target_utilities(spectrum: &Spectrum, target: &[f64]) -> Result<UtilityProfile, CkError> {
    utilities_with_threshold(spectrum, target, DEFAULT_THRESHOLD)
}

pub fn utilities_with_threshold(
    spectrum: &Spectrum,
    f_values: &[f64],
    threshold: f64,
) -> Result<UtilityProfile, CkError> {
    if spectrum.vectors.rows() != f_values.len() {
        return Err(CkError::Shape(format!(
            "{} function values for eigenvectors of length {}",
            f_values.len(),
            spectrum.vectors.rows()
        )));
    }
    let proj = spectrum.project(f_values);
    let raw: Vec<f64> = proj.iter().map(|p| p * p).collect();
    let order = tie_order(&spectrum.values, &raw);
    let raw_sorted: Vec<f64> = order.iter().map(|&k| raw[k]).collect();
    let mut profile = UtilityProfile::from_raw(&raw_sorted, threshold)?;
    profile.eigenvalues = order.iter().map(|&k| spectrum.values[k]).collect();
    let fnorm2: f64 = f_values.iter().map(|v| v * v).sum();
    profile.projected_fraction = raw.iter().sum::<f64>() / fnorm2;
    Ok(profile)
}

fn tie_order(values: &[f64], raw: &[f64]) -> Vec<usize> {
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut order: Vec<usize> = (0..values.len()).collect();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && (values[start] - values[end]).abs() <= 1e-12 * scale {
            end += 1;
        }
        order[start..end].sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
        start = end;
    }
    order
}

/// `S_CK` of a profile.
pub fn fl_strength_ck(profile: &UtilityProfile) -> usize {
    profile.strength
}

/// Learned-function utilities on the readout features of `state` over `x`.
pub fn ck_strength_of(state: &ModelState, x: &Matrix) -> Result<UtilityProfile, CkError> {
    let spec = readout_spectrum(state, x)?;
    let f = network::predict(state, x)?;
    feature_utilities(&spec, &f.column(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativePower {
    /// `η_ρ` of the retained modes.
    pub eigenvalues: Vec<f64>,
    /// `w̄_ρ = ⟨e_ρ, f*⟩`.
    pub coefficients: Vec<f64>,
    /// `C(ρ)`, `ρ = 1..`.
    pub curve: Vec<f64>,
}

/// `C(ρ) = Σ_{ρ'≤ρ} η w̄² / Σ η w̄²` over modes with `η > 1e-12 · trace`.
pub fn cumulative_power(spectrum: &Spectrum, target: &[f64]) -> Result<CumulativePower, CkError> {
    if spectrum.vectors.rows() != target.len() {
        return Err(CkError::Shape(format!(
            "{} target values for eigenvectors of length {}",
            target.len(),
            spectrum.vectors.rows()
        )));
    }
    let keep = retained(&spectrum.values);
    if keep == 0 {
        return Err(CkError::ZeroPower);
    }
    let proj = spectrum.project(target);
    let eigenvalues = spectrum.values[..keep].to_vec();
    let coefficients = proj[..keep].to_vec();
    let terms: Vec<f64> = eigenvalues
        .iter()
        .zip(&coefficients)
        .map(|(e, w)| e * w * w)
        .collect();
    let total: f64 = terms.iter().sum();
    if !(total > 0.0) {
        return Err(CkError::ZeroPower);
    }
    let mut acc = 0.0;
    let curve = terms
        .iter()
        .map(|t| {
            acc += t;
            acc / total
        })
        .collect();
    Ok(CumulativePower {
        eigenvalues,
        coefficients,
        curve,
    })
}

/// `layer,mode,eigenvalue,normalized_eigenvalue` rows for each layer.
pub fn spectra_csv(spectra: &[(usize, Spectrum)]) -> String {
    let mut out = String::from("layer,mode,eigenvalue,normalized_eigenvalue\n");
    for (layer, spec) in spectra {
        let trace: f64 = spec.values.iter().sum();
        for (k, v) in spec.values.iter().enumerate() {
            let norm = if trace > 0.0 { v / trace } else { 0.0 };
            let _ = writeln!(out, "{layer},{},{v},{norm}", k + 1);
        }
    }
    out
}

/// `mode,utility,cumulative`.
pub fn utilities_csv(profile: &UtilityProfile) -> String {
    let mut out = String::from("mode,utility,cumulative\n");
    for (k, (q, c)) in profile
        .utilities
        .iter()
        .zip(&profile.cumulative)
        .enumerate()
    {
        let _ = writeln!(out, "{},{q},{c}", k + 1);
    }
    out
}

/// `mode,eigenvalue,coefficient_sq,cumulative`.
pub fn cumpower_csv(power: &CumulativePower) -> String {
    let mut out = String::from("mode,eigenvalue,coefficient_sq,cumulative\n");
    for (k, ((e, w), c)) in power
        .eigenvalues
        .iter()
        .zip(&power.coefficients)
        .zip(&power.curve)
        .enumerate()
    {
        let _ = writeln!(out, "{},{e},{},{c}", k + 1, w * w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init, NetworkConfig};
    use crate::numerics::{gaussian, Rng};

    fn diag_spectrum(values: &[f64]) -> Spectrum {
        Spectrum {
            values: values.to_vec(),
            vectors: Matrix::identity(values.len()),
        }
    }

    #[test]
    fn layer_zero_is_input_gram() {
        let state = init(&NetworkConfig::mlp(3, 5, 2, 1), 0).unwrap();
        let mut rng = Rng::new(1);
        let x = gaussian(&mut rng, 6, 3, 1.0);
        let k = ck_matrix(&state, &x, 0).unwrap();
        assert!(k.entries.sub(&numerics::gram(&x)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn matches_feature_map_gram_and_rank_bound() {
        let state = init(&NetworkConfig::mlp(3, 4, 2, 1), 2).unwrap();
        let mut rng = Rng::new(2);
        let x = gaussian(&mut rng, 9, 3, 1.0);
        for l in 1..=2 {
            let k = ck_matrix(&state, &x, l).unwrap();
            let phi = network::feature_map(&state, &x, l).unwrap();
            let direct = Matrix::from_fn(9, 9, |i, j| numerics::dot(phi.row(i), phi.row(j)));
            assert!(k.entries.sub(&direct).unwrap().max_abs() < 1e-12);
            let spec = sym_eig(&k.entries).unwrap();
            let tr = k.entries.trace();
            let rank = spec.values.iter().filter(|v| **v > 1e-10 * tr).count();
            assert!(rank <= 4);
            k.check_psd().unwrap();
        }
        assert!(ck_matrix(&state, &x, 3).is_err());
    }

    #[test]
    fn small_route_spectrum_matches_dense() {
        let mut rng = Rng::new(4);
        let phi = gaussian(&mut rng, 12, 3, 1.0);
        let fast = feature_spectrum(&phi).unwrap();
        let dense = truncate(sym_eig(&numerics::gram(&phi)).unwrap());
        assert_eq!(fast.len(), 3);
        assert_eq!(dense.len(), 3);
        for k in 0..3 {
            assert!((fast.values[k] - dense.values[k]).abs() < 1e-10 * dense.values[0]);
            let a = fast.vector(k);
            let b = dense.vector(k);
            assert!((numerics::dot(&a, &b).abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn utilities_of_eigenvectors() {
        let spec = diag_spectrum(&[3.0, 2.0, 1.0]);
        let p = feature_utilities(&spec, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.utilities, vec![1.0, 0.0, 0.0]);
        assert_eq!(p.strength, 1);
        let s = 0.5f64.sqrt();
        let p = feature_utilities(&spec, &[s, s, 0.0]).unwrap();
        assert!((p.utilities[0] - 0.5).abs() < 1e-15 && (p.utilities[1] - 0.5).abs() < 1e-15);
        assert_eq!(*p.cumulative.last().unwrap(), 1.0);
        assert!(matches!(
            feature_utilities(&spec, &[0.0; 3]),
            Err(CkError::Degenerate)
        ));
    }

    #[test]
    fn strength_examples() {
        assert_eq!(
            UtilityProfile::from_raw(&[0.96, 0.04], 0.95)
                .unwrap()
                .strength,
            1
        );
        assert_eq!(
            UtilityProfile::from_raw(&[0.5, 0.5], 0.95)
                .unwrap()
                .strength,
            2
        );
        let uniform = UtilityProfile::from_raw(&[1.0; 100], 0.95).unwrap();
        assert_eq!(fl_strength_ck(&uniform), 96);
        // lowering the threshold never raises the strength
        let mut last = usize::MAX;
        for eps in [0.99, 0.95, 0.8, 0.5, 0.1] {
            let s = uniform.strength_at(eps);
            assert!(s <= last);
            last = s;
        }
    }

    #[test]
    fn ties_are_ordered_by_projection() {
        let spec = diag_spectrum(&[2.0, 1.0, 1.0]);
        let p = feature_utilities(&spec, &[0.1, 0.2, 0.9]).unwrap();
        assert!(p.utilities[1] > p.utilities[2]);
        assert_eq!(p.eigenvalues, vec![2.0, 1.0, 1.0]);
        assert_eq!(p.strength, 2);
    }

    #[test]
    fn scale_invariance_and_bias_component() {
        let mut rng = Rng::new(5);
        let phi = gaussian(&mut rng, 10, 4, 1.0);
        let spec = feature_spectrum(&phi).unwrap();
        let f: Vec<f64> = (0..10).map(|i| (i as f64).sin() + 0.3).collect();
        let a = feature_utilities(&spec, &f).unwrap();
        let scaled: Vec<f64> = f.iter().map(|v| -4.0 * v).collect();
        let b = feature_utilities(&spec, &scaled).unwrap();
        for (x, y) in a.utilities.iter().zip(&b.utilities) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.projected_fraction < 1.0);
        assert_eq!(*a.cumulative.last().unwrap(), 1.0);
        assert!(a.cumulative.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn target_profile_matches_dense_projection() {
        let mut rng = Rng::new(8);
        let g = gaussian(&mut rng, 10, 10, 1.0);
        let spec = sym_eig(&numerics::gram(&g)).unwrap();
        let target: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let p = target_utilities(&spec, &target).unwrap();
        let raw: Vec<f64> = (0..10)
            .map(|k| {
                let e = spec.vector(k);
                numerics::dot(&e, &target).powi(2)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let mut expected: Vec<(f64, usize)> = raw.iter().map(|r| r / total).zip(0..).collect();
        expected.sort_by(|a, b| spec.values[b.1].total_cmp(&spec.values[a.1]));
        for (q, (e, _)) in p.utilities.iter().zip(&expected) {
            assert!((q - e).abs() < 1e-12);
        }
        let same = feature_utilities(&spec, &target).unwrap();
        assert_eq!(same, p);
        let top = spec.vector(0);
        assert_eq!(target_utilities(&spec, &top).unwrap().strength, 1);
    }

    #[test]
    fn cumulative_power_properties() {
        let spec = diag_spectrum(&[4.0, 2.0, 1.0, 0.0]);
        let c = cumulative_power(&spec, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.curve[0], 1.0);
        assert_eq!(c.curve.len(), 3);

        let mut rng = Rng::new(6);
        let g = gaussian(&mut rng, 8, 8, 1.0);
        let spec = sym_eig(&numerics::gram(&g)).unwrap();
        let target: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let c = cumulative_power(&spec, &target).unwrap();
        assert!(c.curve.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*c.curve.last().unwrap(), 1.0);

        let scaled = Spectrum {
            values: spec.values.iter().map(|v| v * 3.7).collect(),
            vectors: spec.vectors.clone(),
        };
        let cs = cumulative_power(&scaled, &target).unwrap();
        for (a, b) in c.curve.iter().zip(&cs.curve) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON);
        }
        assert!(matches!(
            cumulative_power(&diag_spectrum(&[0.0, 0.0]), &[1.0, 1.0]),
            Err(CkError::ZeroPower)
        ));
    }

    #[test]
    fn csv_exports() {
        let spec = diag_spectrum(&[3.0, 1.0]);
        let s = spectra_csv(&[(1, spec.clone())]);
        assert_eq!(
            s,
            "layer,mode,eigenvalue,normalized_eigenvalue\n1,1,3,0.75\n1,2,1,0.25\n"
        );
        let p = feature_utilities(&spec, &[1.0, 1.0]).unwrap();
        assert!(utilities_csv(&p).starts_with("mode,utility,cumulative\n1,0.5,0.5\n"));
        let c = cumulative_power(&spec, &[1.0, 1.0]).unwrap();
        assert!(cumpower_csv(&c).ends_with("2,1,1,1\n"));
    }

    #[test]
    fn network_strength_is_within_width() {
        let state = init(&NetworkConfig::mlp(3, 6, 2, 1), 3).unwrap();
        let mut rng = Rng::new(3);
        let x = gaussian(&mut rng, 20, 3, 1.0);
        let p = ck_strength_of(&state, &x).unwrap();
        assert!(p.strength >= 1 && p.strength <= 6);
    }
}
