//! Fully connected ReLU networks with standard and μP initialization.
//!
//! Layer `l` (1-based, `1 ≤ l ≤ L`) holds `W^l ∈ ℝ^{n_l × n_{l-1}}` and
//! `b^l ∈ ℝ^{n_l}`. Hidden pre-activations follow `h^l = W^l a^{l-1} + b^l`
//! with `a^0 = x` and `a^l = φ(h^l)`; the readout is
//! `f(x) = W^L a^{L-1} + b^L` and the network returns `f(x) / γ`.
//!
//! Parameters are flattened as `(W^1, b^1, …, W^L, b^L)`, each weight
//! row-major. Kernel assembly, Jacobians and checkpoints all use this order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{self, gaussian, gemm, load_matrix, save_matrix, Matrix, Rng, Transpose};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {0}")]
    NonFinite(usize),
    #[error("layer {layer} out of range (network has {hidden} hidden layers)")]
    LayerOutOfRange { layer: usize, hidden: usize },
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint meta: {0}")]
    Meta(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// He initialization `N(0, 2/fan_in)`, one learning rate for all layers.
    Standard,
    /// `N(0, 1/fan_in)` initialization with per-layer learning rates.
    Mup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of hidden layers; the network has `hidden_layers + 1` weight layers.
    pub hidden_layers: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// Output divisor.
    pub gamma: f64,
    pub parameterization: Parameterization,
    /// Apply φ to the last hidden layer before the readout. Turning this off
    /// gives the readout `W^L h^{L-1} + b^L` on raw pre-activations.
    #[serde(default = "default_true")]
    pub activate_last_hidden: bool,
}

fn default_true() -> bool {
    true
}

impl NetworkConfig {
    /// ReLU, γ = 1, μP.
    pub fn mlp(
        input_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
        output_dim: usize,
    ) -> Self {
        Self {
            input_dim,
            hidden_width,
            hidden_layers,
            output_dim,
            activation: Activation::Relu,
            gamma: 1.0,
            parameterization: Parameterization::Mup,
            activate_last_hidden: true,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NetworkError::InvalidConfig(
                "input and output dimensions must be positive".into(),
            ));
        }
        if self.hidden_width == 0 {
            return Err(NetworkError::InvalidConfig(
                "hidden width must be >= 1".into(),
            ));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(NetworkError::InvalidConfig(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    /// `[n_0, n_1, …, n_L]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.output_dim);
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// Whether the input of weight layer `l` (1-based) passes through φ.
    fn layer_input_activated(&self, l: usize) -> bool {
        if l == 1 {
            false
        } else if l == self.num_layers() {
            self.activate_last_hidden
        } else {
            true
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer activations of one batch.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `pre[l] = h^l` for `0 ≤ l < L`; `pre[0]` is the input batch.
    pub pre: Vec<Matrix>,
    /// `inputs[l]` is what weight layer `l + 1` consumes.
    pub inputs: Vec<Matrix>,
    /// Readout before the γ division.
    pub raw_output: Matrix,
}

/// Gradients laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            weights: state
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: state.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            s += w.as_slice().iter().map(|v| v * v).sum::<f64>();
            s += b.iter().map(|v| v * v).sum::<f64>();
        }
        s.sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.scale_in_place(c);
            b.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Initial parameters: biases zero, weights Gaussian with fan-in variance
/// (`1/n_{l-1}` under μP, `2/n_{l-1}` under He). Layer `l` draws from stream `l`
/// of `seed`.
pub fn init(config: &NetworkConfig, seed: u64) -> Result<ModelState, NetworkError> {
    config.validate()?;
    let dims = config.layer_dims();
    let mut weights = Vec::with_capacity(config.num_layers());
    let mut biases = Vec::with_capacity(config.num_layers());
    for l in 1..dims.len() {
        let fan_in = dims[l - 1] as f64;
        let var = match config.parameterization {
            Parameterization::Mup => 1.0 / fan_in,
            Parameterization::Standard => 2.0 / fan_in,
        };
        let mut rng = Rng::stream(seed, l as u64);
        weights.push(gaussian(&mut rng, dims[l], dims[l - 1], var.sqrt()));
        biases.push(vec![0.0; dims[l]]);
    }
    Ok(ModelState {
        config: config.clone(),
        weights,
        biases,
    })
}

impl ModelState {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        if flat.len() != self.param_count() {
            return Err(NetworkError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.rows() * w.cols();
            w.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let nb = b.len();
            b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Same parameters, different output scale.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut s = self.clone();
        s.config.gamma = gamma;
        s
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if self.weights.len() != dims.len() - 1 || self.biases.len() != dims.len() - 1 {
            return Err(NetworkError::Shape(
                "layer count does not match config".into(),
            ));
        }
        for l in 1..dims.len() {
            if self.weights[l - 1].shape() != (dims[l], dims[l - 1])
                || self.biases[l - 1].len() != dims[l]
            {
                return Err(NetworkError::Shape(format!(
                    "layer {l} has the wrong shape"
                )));
            }
        }
        Ok(())
    }
}

fn check_input(state: &ModelState, x: &Matrix) -> Result<(), NetworkError> {
    if x.cols() != state.config.input_dim {
        return Err(NetworkError::Shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            state.config.input_dim
        )));
    }
    Ok(())
}

/// `a W^T + 1 bᵀ` for a batch `a`.
fn affine(a: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix, NetworkError> {
    let mut h = Matrix::zeros(a.rows(), w.rows());
    for i in 0..h.rows() {
        h.row_mut(i).copy_from_slice(b);
    }
    gemm(1.0, a, Transpose::No, w, Transpose::Yes, 1.0, &mut h)?;
    Ok(h)
}

/// Outputs `f(X)/γ` (m × n_L) and the per-layer trace.
pub fn forward(state: &ModelState, x: &Matrix) -> Result<(Matrix, ForwardTrace), NetworkError> {
    check_input(state, x)?;
    let cfg = &state.config;
    let act = cfg.activation;
    let num_layers = state.num_layers();
    let mut pre = Vec::with_capacity(num_layers);
    let mut inputs = Vec::with_capacity(num_layers);
    pre.push(x.clone());
    inputs.push(x.clone());
    for l in 1..num_layers {
        let h = affine(&inputs[l - 1], &state.weights[l - 1], &state.biases[l - 1])?;
        if !h.is_finite() {
            return Err(NetworkError::NonFinite(l));
        }
        let a = if cfg.layer_input_activated(l + 1) {
            h.map(|v| act.apply(v))
        } else {
            h.clone()
        };
        pre.push(h);
        inputs.push(a);
    }
    let raw_output = affine(
        &inputs[num_layers - 1],
        &state.weights[num_layers - 1],
        &state.biases[num_layers - 1],
    )?;
    if !raw_output.is_finite() {
        return Err(NetworkError::NonFinite(num_layers));
    }
    let outputs = raw_output.scale(1.0 / cfg.gamma);
    Ok((
        outputs,
        ForwardTrace {
            pre,
            inputs,
            raw_output,
        },
    ))
}

/// Network outputs only.
pub fn predict(state: &ModelState, x: &Matrix) -> Result<Matrix, NetworkError> {
    Ok(forward(state, x)?.0)
}

/// Gradient of `⟨upstream, f(X)/γ⟩` with respect to every parameter, using a
/// trace produced by [`forward`] on the same batch.
pub fn backward_with_trace(
    state: &ModelState,
    trace: &ForwardTrace,
    upstream: &Matrix,
) -> Result<Gradients, NetworkError> {
    let cfg = &state.config;
    let m = trace.pre[0].rows();
    if upstream.shape() != (m, cfg.output_dim) {
        return Err(NetworkError::Shape(format!(
            "upstream gradient is {}x{}, outputs are {}x{}",
            upstream.rows(),
            upstream.cols(),
            m,
            cfg.output_dim
        )));
    }
    let num_layers = state.num_layers();
    let mut grads = Gradients::zeros_like(state);
    let mut delta = upstream.scale(1.0 / cfg.gamma);
    for l in (1..=num_layers).rev() {
        let input = &trace.inputs[l - 1];
        gemm(
            1.0,
            &delta,
            Transpose::Yes,
            input,
            Transpose::No,
            0.0,
            &mut grads.weights[l - 1],
        )?;
        grads.biases[l - 1] = delta.column_sums();
        if l == 1 {
            break;
        }
        let mut next = numerics::matmul(&delta, &state.weights[l - 1])?;
        if cfg.layer_input_activated(l) {
            let h = &trace.pre[l - 1];
            for (g, &hv) in next.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *g *= cfg.activation.derivative(hv);
            }
        }
        delta = next;
    }
    Ok(grads)
}

/// Gradient of `⟨upstream, f(X)/γ⟩` with respect to every parameter.
pub fn backward(
    state: &ModelState,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<Gradients, NetworkError> {
    let (_, trace) = forward(state, x)?;
    backward_with_trace(state, &trace, upstream)
}

/// Pre-activations `h^l` of layer `l` (rows = samples); `l = 0` is `X`.
pub fn feature_map(state: &ModelState, x: &Matrix, layer: usize) -> Result<Matrix, NetworkError> {
    let hidden = state.config.hidden_layers;
    if layer > hidden {
        return Err(NetworkError::LayerOutOfRange { layer, hidden });
    }
    let (_, mut trace) = forward(state, x)?;
    Ok(trace.pre.swap_remove(layer))
}

/// Post-activations `φ(h^l)`; `l = 0` is `X`.
pub fn activation_map(
    state: &ModelState,
    x: &Matrix,
    layer: usize,
) -> Result<Matrix, NetworkError> {
    let hidden = state.config.hidden_layers;
    if layer > hidden {
        return Err(NetworkError::LayerOutOfRange { layer, hidden });
    }
    let (_, trace) = forward(state, x)?;
    if layer == 0 {
        return Ok(trace.pre[0].clone());
    }
    let act = state.config.activation;
    Ok(trace.pre[layer].map(|v| act.apply(v)))
}

/// The representation the readout consumes (`a^{L-1}`).
pub fn readout_features(state: &ModelState, x: &Matrix) -> Result<Matrix, NetworkError> {
    let (_, mut trace) = forward(state, x)?;
    Ok(trace.inputs.pop().expect("at least one layer"))
}

/// `∇_θ (f(x)/γ)` for a single input row, one row per output unit, in the
/// flattened parameter order.
pub fn param_jacobian(state: &ModelState, x: &[f64]) -> Result<Matrix, NetworkError> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let (_, trace) = forward(state, &xm)?;
    let n_out = state.config.output_dim;
    let p = state.param_count();
    let mut jac = Matrix::zeros(n_out, p);
    for o in 0..n_out {
        let mut upstream = Matrix::zeros(1, n_out);
        upstream[(0, o)] = 1.0;
        let g = backward_with_trace(state, &trace, &upstream)?;
        jac.row_mut(o).copy_from_slice(&g.flatten());
    }
    Ok(jac)
}

/// Per-layer factors of the parameter Jacobian of a batch.
///
/// For weight layer `l`, `∂(f_o/γ)/∂W^l = δ_o^l ⊗ a^{l-1}` and
/// `∂(f_o/γ)/∂b^l = δ_o^l`, so the layer's share of the tangent kernel is
/// `(Σ_o Δ_o Δ_oᵀ) ∘ (A Aᵀ + 1)`.
#[derive(Clone, Debug)]
pub struct LayerTangent {
    /// `a^{l-1}` for every sample (m × n_{l-1}).
    pub input: Matrix,
    /// `δ^l` for every sample, output units stacked side by side
    /// (m × (n_l · n_out)).
    pub delta: Matrix,
}

pub fn tangent_factors(state: &ModelState, x: &Matrix) -> Result<Vec<LayerTangent>, NetworkError> {
    let (_, trace) = forward(state, x)?;
    let cfg = &state.config;
    let m = x.rows();
    let n_out = cfg.output_dim;
    let num_layers = state.num_layers();
    let dims = cfg.layer_dims();

    // per-output deltas, propagated together
    let mut deltas: Vec<Matrix> = (0..n_out)
        .map(|o| {
            let mut d = Matrix::zeros(m, n_out);
            for i in 0..m {
                d[(i, o)] = 1.0 / cfg.gamma;
            }
            d
        })
        .collect();
    let mut out: Vec<LayerTangent> = Vec::with_capacity(num_layers);
    for l in (1..=num_layers).rev() {
        let width = dims[l];
        let mut stacked = Matrix::zeros(m, width * n_out);
        for (o, d) in deltas.iter().enumerate() {
            for i in 0..m {
                stacked.row_mut(i)[o * width..(o + 1) * width].copy_from_slice(d.row(i));
            }
        }
        out.push(LayerTangent {
            input: trace.inputs[l - 1].clone(),
            delta: stacked,
        });
        if l == 1 {
            break;
        }
        for d in deltas.iter_mut() {
            let mut next = numerics::matmul(d, &state.weights[l - 1])?;
            if cfg.layer_input_activated(l) {
                let h = &trace.pre[l - 1];
                for (g, &hv) in next.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *g *= cfg.activation.derivative(hv);
                }
            }
            *d = next;
        }
    }
    out.reverse();
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: NetworkConfig,
    seed: Option<u64>,
    gamma: f64,
    param_order: String,
}

/// `meta.toml` plus `w{l}.bin` / `b{l}.bin` for every layer.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    state: &ModelState,
    seed: Option<u64>,
) -> Result<(), NetworkError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        config: state.config.clone(),
        seed,
        gamma: state.config.gamma,
        param_order: "W1,b1,...,WL,bL (row-major)".into(),
    };
    fs::write(
        dir.join("meta.toml"),
        toml::to_string(&meta).map_err(|e| NetworkError::Meta(e.to_string()))?,
    )?;
    for (l, (w, b)) in state.weights.iter().zip(&state.biases).enumerate() {
        save_matrix(dir.join(format!("w{}.bin", l + 1)), w)?;
        save_matrix(
            dir.join(format!("b{}.bin", l + 1)),
            &Matrix::column_vector(b),
        )?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelState, NetworkError> {
    let dir = dir.as_ref();
    let meta: CheckpointMeta = toml::from_str(&fs::read_to_string(dir.join("meta.toml"))?)
        .map_err(|e| NetworkError::Meta(e.to_string()))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 1..=meta.config.num_layers() {
        weights.push(load_matrix(dir.join(format!("w{l}.bin")))?);
        biases.push(load_matrix(dir.join(format!("b{l}.bin")))?.into_vec());
    }
    let state = ModelState {
        config: meta.config,
        weights,
        biases,
    };
    state.validate()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(parameterization: Parameterization) -> NetworkConfig {
        NetworkConfig {
            parameterization,
            ..NetworkConfig::mlp(3, 4, 1, 2)
        }
    }

    fn loss_at(state: &ModelState, x: &Matrix, up: &Matrix) -> f64 {
        predict(state, x).unwrap().frobenius_dot(up)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut s = init(&NetworkConfig::mlp(5, 7, 3, 2), 1).unwrap();
        let zeros = vec![0.0; s.param_count()];
        s.set_flat_params(&zeros).unwrap();
        let x = gaussian(&mut Rng::new(2), 4, 5, 1.0);
        assert_eq!(predict(&s, &x).unwrap(), Matrix::zeros(4, 2));
    }

    #[test]
    fn depth_one_is_affine() {
        let s = init(&NetworkConfig::mlp(3, 1, 0, 2), 9).unwrap();
        let mut s = s;
        s.biases[0] = vec![0.5, -1.0];
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]);
        let out = predict(&s, &x).unwrap();
        for o in 0..2 {
            let expected = numerics::dot(s.weights[0].row(o), x.row(0)) + s.biases[0][o];
            assert!((out[(0, o)] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn halving_gamma_doubles_outputs() {
        let s = init(&NetworkConfig::mlp(4, 8, 2, 1), 3).unwrap();
        let x = gaussian(&mut Rng::new(4), 6, 4, 1.0);
        let a = predict(&s, &x).unwrap();
        let b = predict(&s.with_gamma(0.5), &x).unwrap();
        assert_eq!(b, a.scale(2.0));
        let c = predict(&s.with_gamma(0.01), &x).unwrap();
        assert_eq!(c, a.scale(100.0));
    }

    #[test]
    fn biases_start_at_zero_and_init_is_deterministic() {
        let cfg = NetworkConfig::mlp(10, 20, 3, 1);
        let a = init(&cfg, 77).unwrap();
        assert!(a.biases.iter().flatten().all(|&b| b == 0.0));
        assert_eq!(a, init(&cfg, 77).unwrap());
        assert_ne!(a, init(&cfg, 78).unwrap());
        assert_eq!(a.param_count(), cfg.param_count());
        assert_eq!(
            a.flat_params().len(),
            10 * 20 + 20 + 2 * (400 + 20) + 20 + 1
        );
    }

    #[test]
    fn backward_matches_central_differences() {
        for par in [Parameterization::Mup, Parameterization::Standard] {
            let cfg = small(par);
            let s = init(&cfg, 5).unwrap();
            let mut rng = Rng::new(6);
            let x = gaussian(&mut rng, 7, 3, 1.0);
            let up = gaussian(&mut rng, 7, 2, 1.0);
            let g = backward(&s, &x, &up).unwrap().flatten();
            let theta = s.flat_params();
            let h = 1e-4;
            for k in 0..theta.len() {
                let mut plus = s.clone();
                let mut minus = s.clone();
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                plus.set_flat_params(&tp).unwrap();
                minus.set_flat_params(&tm).unwrap();
                let fd = (loss_at(&plus, &x, &up) - loss_at(&minus, &x, &up)) / (2.0 * h);
                let denom = g[k].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (g[k] - fd).abs() / denom < 1e-5,
                    "param {k}: {} vs {fd}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = init(&small(Parameterization::Mup), 5).unwrap();
        let x = gaussian(&mut Rng::new(1), 4, 3, 1.0);
        let g = backward(&s, &x, &Matrix::zeros(4, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn readout_bias_gradient_is_column_sum_over_gamma() {
        let s = init(&small(Parameterization::Mup), 5)
            .unwrap()
            .with_gamma(0.25);
        let mut rng = Rng::new(2);
        let x = gaussian(&mut rng, 5, 3, 1.0);
        let up = gaussian(&mut rng, 5, 2, 1.0);
        let g = backward(&s, &x, &up).unwrap();
        let sums = up.column_sums();
        for o in 0..2 {
            assert!((g.biases[1][o] - sums[o] / 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_map_layers() {
        let s = init(&NetworkConfig::mlp(3, 5, 2, 1), 8).unwrap();
        let x = gaussian(&mut Rng::new(3), 6, 3, 1.0);
        assert_eq!(feature_map(&s, &x, 0).unwrap(), x);
        let h2 = feature_map(&s, &x, 2).unwrap();
        assert_eq!(h2.shape(), (6, 5));
        assert!(matches!(
            feature_map(&s, &x, 3),
            Err(NetworkError::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn identity_layer_feature_map_is_input() {
        let mut s = init(&NetworkConfig::mlp(3, 3, 1, 1), 0).unwrap();
        s.weights[0] = Matrix::identity(3);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]);
        assert_eq!(feature_map(&s, &x, 1).unwrap(), x);
    }

    #[test]
    fn jacobian_of_one_parameter_linear_model() {
        let mut s = init(&NetworkConfig::mlp(1, 1, 0, 1), 0).unwrap();
        s.weights[0] = Matrix::from_rows(&[[0.7]]);
        // parameters are (w, b): ∂f/∂w = x, ∂f/∂b = 1
        let j = param_jacobian(&s, &[2.5]).unwrap();
        assert_eq!(j.row(0), &[2.5, 1.0]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = init(&NetworkConfig::mlp(3, 4, 1, 1), 12).unwrap();
        let x = [0.3, -1.2, 0.8];
        let j = param_jacobian(&s, &x).unwrap();
        let theta = s.flat_params();
        let xm = Matrix::from_rows(&[x]);
        let h = 1e-4;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let mut plus = s.clone();
            let mut minus = s.clone();
            plus.set_flat_params(&tp).unwrap();
            minus.set_flat_params(&tm).unwrap();
            let fd = (predict(&plus, &xm).unwrap()[(0, 0)] - predict(&minus, &xm).unwrap()[(0, 0)])
                / (2.0 * h);
            let denom = j[(0, k)].abs().max(fd.abs()).max(1e-6);
            assert!((j[(0, k)] - fd).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn zero_input_kills_first_layer_jacobian() {
        let s = init(&NetworkConfig::mlp(3, 4, 2, 1), 1).unwrap();
        let j = param_jacobian(&s, &[0.0, 0.0, 0.0]).unwrap();
        assert!(j.row(0)[..12].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn literal_readout_skips_last_activation() {
        let mut cfg = NetworkConfig::mlp(2, 3, 1, 1);
        cfg.activate_last_hidden = false;
        let s = init(&cfg, 4).unwrap();
        let x = Matrix::from_rows(&[[1.0, -1.0]]);
        let h1 = feature_map(&s, &x, 1).unwrap();
        let out = predict(&s, &x).unwrap()[(0, 0)];
        let expected = numerics::dot(s.weights[1].row(0), h1.row(0));
        assert!((out - expected).abs() < 1e-14);
        assert_eq!(readout_features(&s, &x).unwrap(), h1);
    }

    #[test]
    fn positive_homogeneity_without_bias() {
        let s = init(&NetworkConfig::mlp(4, 6, 2, 1), 2).unwrap();
        let x = gaussian(&mut Rng::new(9), 5, 4, 1.0);
        let h = feature_map(&s, &x, 1).unwrap();
        let h3 = feature_map(&s, &x.scale(3.0), 1).unwrap();
        assert!(h3.sub(&h.scale(3.0)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = init(&NetworkConfig::mlp(3, 4, 2, 1), 6).unwrap();
        save_checkpoint(dir.path(), &s, Some(6)).unwrap();
        assert!(dir.path().join("w1.bin").exists());
        assert!(dir.path().join("b3.bin").exists());
        assert_eq!(load_checkpoint(dir.path()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let mut cfg = NetworkConfig::mlp(3, 4, 1, 1);
        cfg.gamma = 0.0;
        assert!(init(&cfg, 0).is_err());
        let s = init(&NetworkConfig::mlp(3, 4, 1, 1), 0).unwrap();
        assert!(matches!(
            predict(&s, &Matrix::zeros(2, 4)),
            Err(NetworkError::Shape(_))
        ));
    }
}
