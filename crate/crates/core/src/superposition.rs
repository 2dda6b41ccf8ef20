//! Feature and sample dimensionality (how exclusively a vector occupies its
//! own direction among a set of vectors).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::network::{self, ModelState, NetworkError};
use crate::numerics::{self, Matrix};

/// Default threshold below which a dimensionality counts as zero.
pub const ZERO_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum SuperpositionError {
    #[error("empty input")]
    Empty,
    #[error("number of bins must be >= 1")]
    NoBins,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureAxis {
    /// Columns of `W`: one vector per input direction of the layer.
    #[default]
    Columns,
    Rows,
}

/// `D_i = ‖v_i‖² / Σ_j (v̂_i · v_j)²` for every row `v_i`, computed as
/// `G_ii² / Σ_j G_ij²` from the row Gram `G`. Zero rows get 0.
pub fn row_dimensionality(vectors: &Matrix) -> Result<Vec<f64>, SuperpositionError> {
    if vectors.rows() == 0 || vectors.cols() == 0 {
        return Err(SuperpositionError::Empty);
    }
    let g = numerics::matmul_nt(vectors, vectors).expect("row Gram");
    Ok((0..g.rows())
        .map(|i| {
            let gii = g[(i, i)];
            if gii == 0.0 {
                return 0.0;
            }
            let denom: f64 = g.row(i).iter().map(|v| v * v).sum();
            gii * gii / denom
        })
        .collect())
}

/// Dimensionality of each feature vector of a weight matrix.
pub fn feature_dimensionality(
    w: &Matrix,
    axis: FeatureAxis,
) -> Result<Vec<f64>, SuperpositionError> {
    match axis {
        FeatureAxis::Rows => row_dimensionality(w),
        FeatureAxis::Columns => row_dimensionality(&w.transpose()),
    }
}

/// Dimensionality of each sample's feature vector (rows = samples).
pub fn sample_dimensionality(features: &Matrix) -> Result<Vec<f64>, SuperpositionError> {
    row_dimensionality(features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over `[0, 1]`; the last bin is closed and values outside the
/// range land in the end bins.
pub fn dim_histogram(values: &[f64], n_bins: usize) -> Result<Histogram, SuperpositionError> {
    if n_bins == 0 {
        return Err(SuperpositionError::NoBins);
    }
    let edges = (0..=n_bins).map(|k| k as f64 / n_bins as f64).collect();
    let mut counts = vec![0; n_bins];
    for &v in values {
        let idx = ((v * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Fraction of values `≤ tol`; 0 for an empty list.
pub fn zero_fraction(values: &[f64], tol: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v <= tol).count() as f64 / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionalityReport {
    /// Weight layer (1-based).
    pub layer: usize,
    pub feature_dims: Vec<f64>,
    pub sample_dims: Vec<f64>,
    pub histogram: Histogram,
    pub zero_fraction: f64,
    pub tol: f64,
    pub axis: FeatureAxis,
}

/// Feature dimensionality of `W^l` and sample dimensionality of `φ(h^l)`
/// (the input `X` when `l - 1 = 0`) for every weight layer `l`.
pub fn dimensionality_reports(
    state: &ModelState,
    x: &Matrix,
    axis: FeatureAxis,
    n_bins: usize,
    tol: f64,
) -> Result<Vec<DimensionalityReport>, SuperpositionError> {
    let (_, trace) = network::forward(state, x)?;
    (0..state.num_layers())
        .map(|i| {
            let feature_dims = feature_dimensionality(&state.weights[i], axis)?;
            let sample_dims = sample_dimensionality(&trace.inputs[i])?;
            Ok(DimensionalityReport {
                layer: i + 1,
                histogram: dim_histogram(&feature_dims, n_bins)?,
                zero_fraction: zero_fraction(&feature_dims, tol),
                feature_dims,
                sample_dims,
                tol,
                axis,
            })
        })
        .collect()
}

/// `layer,index,kind,dim`.
pub fn dims_csv(reports: &[DimensionalityReport]) -> String {
    let mut out = String::from("layer,index,kind,dim\n");
    for r in reports {
        for (i, d) in r.feature_dims.iter().enumerate() {
            let _ = writeln!(out, "{},{i},feature,{d}", r.layer);
        }
        for (i, d) in r.sample_dims.iter().enumerate() {
            let _ = writeln!(out, "{},{i},sample,{d}", r.layer);
        }
    }
    out
}

/// `layer,bin_lo,bin_hi,count`.
pub fn hist_csv(reports: &[DimensionalityReport]) -> String {
    let mut out = String::from("layer,bin_lo,bin_hi,count\n");
    for r in reports {
        let h = &r.histogram;
        for (k, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{c}", r.layer, h.edges[k], h.edges[k + 1]);
        }
    }
    out
}
