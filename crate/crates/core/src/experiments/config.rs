use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ck::DEFAULT_THRESHOLD;
use crate::datasets::{MspSpec, MultiIndexSpec};
use crate::network::{Activation, NetworkConfig, Parameterization};
use crate::numerics::derive_seed;
use crate::superposition::{FeatureAxis, ZERO_TOL};
use crate::training::{Loss, Optimizer, TrainConfig};

use super::ExperimentError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Msp,
    MultiIndex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub activate_last_hidden: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden_width: 400,
            hidden_layers: 4,
            activation: Activation::Relu,
            parameterization: Parameterization::Mup,
            activate_last_hidden: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Upper bound on epochs at every grid point.
    pub epochs: usize,
    /// When non-zero, each grid point trains for about this many optimizer
    /// steps (`epochs = ceil(step_budget / steps_per_epoch)`, capped by
    /// `epochs`).
    pub step_budget: usize,
    pub grad_clip: f64,
    pub loss: Loss,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            base_lr: t.base_lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            step_budget: 25_000,
            grad_clip: t.grad_clip,
            loss: t.loss,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
        }
    }
}

impl TrainSection {
    pub fn epochs_for(&self, m: usize) -> usize {
        if self.step_budget == 0 {
            return self.epochs;
        }
        let per_epoch = m.div_ceil(self.batch_size.max(1)).max(1);
        self.step_budget
            .div_ceil(per_epoch)
            .clamp(1, self.epochs.max(1))
    }

    pub fn to_train_config(&self, m: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs_for(m),
            grad_clip: self.grad_clip,
            loss: self.loss,
            optimizer: self.optimizer,
            seed,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub ntk: bool,
    pub ck: bool,
    pub superposition: bool,
    /// Kernel predictors are skipped above this training-set size.
    pub ntk_max_m: usize,
    /// Kernel ridge `c` in `λ = c · tr(K) / m`.
    pub ridge: f64,
    /// Predict `f_{θ₀} + μ` on the residuals instead of the plain predictor.
    pub ntk_centered: bool,
    pub probe_cap: usize,
    pub ck_eval: EvalSet,
    pub ck_cap: usize,
    pub ck_threshold: f64,
    pub feature_axis: FeatureAxis,
    pub hist_bins: usize,
    pub zero_tol: f64,
    /// `ε` of the critical dataset size.
    pub critical_eps: f64,
    /// Final training loss above this fraction of the label variance marks a
    /// cell as `slow_training`.
    pub slow_train_fraction: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            ntk: true,
            ck: true,
            superposition: true,
            ntk_max_m: 4000,
            ridge: 1e-6,
            ntk_centered: false,
            probe_cap: crate::ntk::PROBE_CAP,
            ck_eval: EvalSet::Test,
            ck_cap: 2000,
            ck_threshold: DEFAULT_THRESHOLD,
            feature_axis: FeatureAxis::Columns,
            hist_bins: 20,
            zero_tol: ZERO_TOL,
            critical_eps: 0.1,
            slow_train_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub lrs: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            widths: vec![200, 400, 800],
            depths: vec![4],
            lrs: vec![0.05],
        }
    }
}

/// Everything a runner needs; missing keys take the reference MSP defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub m_grid: Vec<usize>,
    pub test_size: usize,
    pub gammas: Vec<f64>,
    /// Label arms; `[false]` trains on true labels only.
    pub shuffled: Vec<bool>,
    pub repeats: usize,
    /// One seed per repeat; derived from `seed` when shorter than `repeats`.
    pub seeds: Vec<u64>,
    pub seed: u64,
    pub output_dir: String,
    pub msp: MspSpec,
    pub multi_index: MultiIndexSpec,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Msp,
            m_grid: vec![100, 250, 500, 1000, 2000, 4000],
            test_size: 1000,
            gammas: vec![1.0],
            shuffled: vec![false],
            repeats: 1,
            seeds: vec![],
            seed: 0,
            output_dir: "runs".into(),
            msp: MspSpec::reference_staircase(),
            multi_index: MultiIndexSpec {
                input_dim: 20,
                latent_dim: 3,
                max_degree: 5,
                noise_std: 0.0,
                seed: 0,
            },
            network: NetworkSection::default(),
            train: TrainSection::default(),
            metrics: MetricsSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Multi-index column of the reference hyperparameters.
    pub fn multi_index_defaults() -> Self {
        let mut cfg = Self {
            task: Task::MultiIndex,
            test_size: 10_000,
            ..Self::default()
        };
        cfg.train.base_lr = 0.001;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::Config(msg.into()));
        if self.m_grid.is_empty() {
            return bad("m_grid must not be empty");
        }
        if self.m_grid.windows(2).any(|w| w[0] >= w[1]) || self.m_grid[0] == 0 {
            return bad("m_grid must be positive and strictly increasing");
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1");
        }
        if self.test_size == 0 {
            return bad("test_size must be >= 1");
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g > 0.0)) {
            return bad("gammas must be non-empty and positive");
        }
        if self.shuffled.is_empty() {
            return bad("shuffled must list at least one arm");
        }
        if !(self.metrics.critical_eps > 0.0 && self.metrics.critical_eps < 1.0) {
            return bad("metrics.critical_eps must lie in (0, 1)");
        }
        if self.metrics.hist_bins == 0 {
            return bad("metrics.hist_bins must be >= 1");
        }
        self.network_config(1.0)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train
            .to_train_config(self.m_grid[0], 0)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        match self.task {
            Task::Msp => self.msp.validate(),
            Task::MultiIndex => self.multi_index.validate(),
        }
        .map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn input_dim(&self) -> usize {
        match self.task {
            Task::Msp => self.msp.input_dim,
            Task::MultiIndex => self.multi_index.input_dim,
        }
    }

    pub fn network_config(&self, gamma: f64) -> NetworkConfig {
        NetworkConfig {
            input_dim: self.input_dim(),
            hidden_width: self.network.hidden_width,
            hidden_layers: self.network.hidden_layers,
            output_dim: 1,
            activation: self.network.activation,
            gamma,
            parameterization: self.network.parameterization,
            activate_last_hidden: self.network.activate_last_hidden,
        }
    }

    /// Seed of every repeat.
    pub fn repeat_seeds(&self) -> Vec<u64> {
        (0..self.repeats)
            .map(|r| {
                self.seeds
                    .get(r)
                    .copied()
                    .unwrap_or_else(|| derive_seed(self.seed, r as u64))
            })
            .collect()
    }

    /// Replaces the base seed and drops explicit per-repeat seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.seeds.clear();
        self
    }

    /// SHA-256 of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_table() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.base_lr, 0.05);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.epochs, 5000);
        assert_eq!(c.train.grad_clip, 1.0);
        assert_eq!(c.network.hidden_width, 400);
        assert_eq!(c.network.hidden_layers, 4);
        assert_eq!(c.test_size, 1000);
        assert_eq!(c.msp.input_dim, 30);
        assert_eq!(c.msp.sets.len(), 8);
        assert_eq!(c.gammas, vec![1.0]);
        let mi = ExperimentConfig::multi_index_defaults();
        assert_eq!(mi.train.base_lr, 0.001);
        assert_eq!(mi.multi_index.input_dim, 20);
        assert_eq!(mi.test_size, 10_000);
        c.validate().unwrap();
        mi.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial =
            ExperimentConfig::from_toml("m_grid = [10, 20]\n[train]\nbase_lr = 0.1\n").unwrap();
        assert_eq!(partial.m_grid, vec![10, 20]);
        assert_eq!(partial.train.base_lr, 0.1);
        assert_eq!(partial.train.batch_size, 64);
        assert!(ExperimentConfig::from_toml("m_grid = [20, 10]").is_err());
        assert!(ExperimentConfig::from_toml("repeats = 0").is_err());
        assert!(ExperimentConfig::from_toml("unknown_key = 1").is_err());
    }

    #[test]
    fn epoch_auto_scaling() {
        let mut t = TrainSection {
            step_budget: 1000,
            epochs: 5000,
            ..TrainSection::default()
        };
        assert_eq!(t.epochs_for(64), 1000);
        assert_eq!(t.epochs_for(640), 100);
        assert_eq!(t.epochs_for(650), 91);
        t.epochs = 50;
        assert_eq!(t.epochs_for(64), 50);
        t.step_budget = 0;
        assert_eq!(t.epochs_for(10_000), 50);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn repeat_seeds_prefer_explicit_values() {
        let mut c = ExperimentConfig {
            repeats: 3,
            seeds: vec![7],
            ..ExperimentConfig::default()
        };
        let s = c.repeat_seeds();
        assert_eq!(s[0], 7);
        assert_eq!(s[1], derive_seed(0, 1));
        c = c.with_seed(5);
        assert_eq!(c.repeat_seeds()[0], derive_seed(5, 0));
    }
}
