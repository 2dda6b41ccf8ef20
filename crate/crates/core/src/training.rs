//! Mini-batch Adam/AdamW with per-layer (μP) learning rates, cosine
//! annealing and global-norm gradient clipping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::network::{
    backward_with_trace, forward, Gradients, ModelState, NetworkConfig, NetworkError,
    Parameterization,
};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has {data} input columns but the network expects {network}")]
    DimensionMismatch { data: usize, network: usize },
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("empty evaluation set")]
    EmptySet,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean of squared errors over all output entries.
    Mse,
    /// Softmax cross-entropy against target distributions (one-hot rows).
    CrossEntropy,
}

impl Loss {
    /// Mean loss over rows.
    pub fn evaluate(self, pred: &Matrix, target: &Matrix) -> f64 {
        match self {
            Loss::Mse => {
                let n = pred.as_slice().len().max(1) as f64;
                pred.as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    / n
            }
            Loss::CrossEntropy => {
                let mut total = 0.0;
                for i in 0..pred.rows() {
                    let row = pred.row(i);
                    let lse = log_sum_exp(row);
                    total -= row
                        .iter()
                        .zip(target.row(i))
                        .map(|(z, t)| t * (z - lse))
                        .sum::<f64>();
                }
                total / pred.rows().max(1) as f64
            }
        }
    }

    /// Loss value and `∂loss/∂pred`.
    fn value_and_grad(self, pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
        let value = self.evaluate(pred, target);
        let grad = match self {
            Loss::Mse => {
                let n = pred.as_slice().len() as f64;
                let mut g = pred.sub(target).expect("shapes agree");
                g.scale_in_place(2.0 / n);
                g
            }
            Loss::CrossEntropy => {
                let m = pred.rows() as f64;
                let mut g = Matrix::zeros(pred.rows(), pred.cols());
                for i in 0..pred.rows() {
                    let row = pred.row(i);
                    let lse = log_sum_exp(row);
                    let t = target.row(i);
                    let tsum: f64 = t.iter().sum();
                    for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                        *gv = ((row[j] - lse).exp() * tsum - t[j]) / m;
                    }
                }
                g
            }
        };
        (value, grad)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Adam; weight decay enters the gradient as an L2 term.
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub loss: Loss,
    pub optimizer: Optimizer,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    /// MSP column of the reference hyperparameter table.
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 5000,
            grad_clip: 1.0,
            loss: Loss::Mse,
            optimizer: Optimizer::AdamW,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr > 0.0) {
            return Err(TrainError::InvalidConfig("base_lr must be > 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig(
                "weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, m: usize) -> usize {
        m.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean mini-batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss on the full training set after the last update.
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
    pub steps: usize,
    pub epochs: usize,
    pub per_layer_lrs: Vec<f64>,
    pub wall_clock_secs: f64,
    /// Parameters before the first update.
    #[serde(skip)]
    pub initial: Option<ModelState>,
}

/// Learning rate of every weight layer. Under μP the first layer uses the
/// base rate and layer `l ≥ 2` uses `base / n_{l-1}`.
pub fn per_layer_lrs(config: &NetworkConfig, base_lr: f64) -> Vec<f64> {
    let dims = config.layer_dims();
    (1..dims.len())
        .map(|l| match config.parameterization {
            Parameterization::Standard => base_lr,
            Parameterization::Mup if l == 1 => base_lr,
            Parameterization::Mup => base_lr / dims[l - 1] as f64,
        })
        .collect()
}

/// `η (1 + cos(π step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64) -> f64 {
    if total_steps == 0 {
        return lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales `grads` to global norm `max_norm` when it is larger; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: u64,
}

impl AdamState {
    fn new(state: &ModelState) -> Self {
        Self {
            m: Gradients::zeros_like(state),
            v: Gradients::zeros_like(state),
            t: 0,
        }
    }

    fn step(
        &mut self,
        state: &mut ModelState,
        grads: &Gradients,
        lrs: &[f64],
        schedule: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let decoupled = match cfg.optimizer {
            Optimizer::AdamW => schedule * cfg.base_lr * cfg.weight_decay,
            Optimizer::Adam => 0.0,
        };
        for l in 0..state.weights.len() {
            let lr = lrs[l] * schedule;
            let tensors = [
                (
                    state.weights[l].as_mut_slice(),
                    grads.weights[l].as_slice(),
                    self.m.weights[l].as_mut_slice(),
                    self.v.weights[l].as_mut_slice(),
                ),
                (
                    state.biases[l].as_mut_slice(),
                    grads.biases[l].as_slice(),
                    self.m.biases[l].as_mut_slice(),
                    self.v.biases[l].as_mut_slice(),
                ),
            ];
            for (p, g, m, v) in tensors {
                for i in 0..p.len() {
                    let gi = g[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= decoupled * p[i];
                    p[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
                }
            }
        }
    }
}

/// Trains `model` on `ds`; see [`train_with_test`].
pub fn train(
    model: &ModelState,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport), TrainError> {
    train_with_test(model, ds, None, cfg)
}

/// Runs `cfg.epochs` passes of shuffled mini-batches. The batch order of
/// epoch `e` comes from stream `e` of `cfg.seed`; the last partial batch is
/// kept.
pub fn train_with_test(
    model: &ModelState,
    ds: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport), TrainError> {
    cfg.validate()?;
    if ds.input_dim() != model.config.input_dim {
        return Err(TrainError::DimensionMismatch {
            data: ds.input_dim(),
            network: model.config.input_dim,
        });
    }
    if ds.output_dim() != model.config.output_dim {
        return Err(TrainError::InvalidConfig(format!(
            "labels have {} columns, network has {} outputs",
            ds.output_dim(),
            model.config.output_dim
        )));
    }
    if ds.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let started = Instant::now();
    let lrs = per_layer_lrs(&model.config, cfg.base_lr);
    let mut state = model.clone();
    let mut adam = AdamState::new(&state);
    let m = ds.len();
    let steps_per_epoch = cfg.steps_per_epoch(m);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = Rng::stream(cfg.seed, epoch as u64).permutation(m);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = ds.x.select_rows(batch);
            let yb = ds.y.select_rows(batch);
            let (out, trace) = forward(&state, &xb).map_err(|e| match e {
                NetworkError::NonFinite(_) => TrainError::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                other => other.into(),
            })?;
            let (loss, upstream) = cfg.loss.value_and_grad(&out, &yb);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            let mut grads = backward_with_trace(&state, &trace, &upstream)?;
            if cfg.optimizer == Optimizer::Adam && cfg.weight_decay > 0.0 {
                for l in 0..state.weights.len() {
                    for (g, p) in grads.weights[l]
                        .as_mut_slice()
                        .iter_mut()
                        .zip(state.weights[l].as_slice())
                    {
                        *g += cfg.weight_decay * p;
                    }
                    for (g, p) in grads.biases[l].iter_mut().zip(&state.biases[l]) {
                        *g += cfg.weight_decay * p;
                    }
                }
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            let schedule = cosine_lr(step, total_steps, 1.0);
            adam.step(&mut state, &grads, &lrs, schedule, cfg);
            step += 1;
        }
        epoch_losses.push(epoch_loss / m as f64);
    }
    if !state.is_finite() {
        return Err(TrainError::Diverged {
            epoch: cfg.epochs,
            step,
            loss: f64::NAN,
        });
    }

    let final_train_loss = gen_error(&state, ds, cfg.loss)?;
    let final_test_loss = test.map(|t| gen_error(&state, t, cfg.loss)).transpose()?;
    Ok((
        state,
        TrainReport {
            epoch_losses,
            final_train_loss,
            final_test_loss,
            steps: step,
            epochs: cfg.epochs,
            per_layer_lrs: lrs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            initial: Some(model.clone()),
        },
    ))
}

/// Anything that maps an input batch to outputs.
pub trait Predictor {
    fn predict(&self, x: &Matrix) -> Result<Matrix, crate::Error>;
}

impl Predictor for ModelState {
    fn predict(&self, x: &Matrix) -> Result<Matrix, crate::Error> {
        Ok(crate::network::predict(self, x)?)
    }
}

impl<F> Predictor for F
where
    F: Fn(&Matrix) -> Matrix,
{
    fn predict(&self, x: &Matrix) -> Result<Matrix, crate::Error> {
        Ok(self(x))
    }
}

/// Mean test loss of a predictor.
pub fn gen_error<P: Predictor + ?Sized>(
    predictor: &P,
    test: &Dataset,
    loss: Loss,
) -> Result<f64, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let pred = predictor.predict(&test.x).map_err(|e| match e {
        crate::Error::Network(n) => TrainError::Network(n),
        other => TrainError::InvalidConfig(other.to_string()),
    })?;
    Ok(loss.evaluate(&pred, &test.y))
}

/// Serialized as `report.toml` plus `losses.csv` (`epoch,train_loss`).
pub fn save_report(dir: impl AsRef<std::path::Path>, report: &TrainReport) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let toml = toml::to_string(report).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("report.toml"), toml)?;
    let mut csv = String::from("epoch,train_loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(dir.join("losses.csv"), csv)
}
