//! Feature-learning gap experiments: datasets, MLPs, training, kernel and
//! feature diagnostics.

// `!(x > 0.0)` is used on purpose so NaN takes the error branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ck;
pub mod datasets;
pub mod experiments;
pub mod network;
pub mod ntk;
pub mod numerics;
pub mod superposition;
pub mod training;

pub use datasets::{Dataset, DatasetError, MspSpec};
pub use network::{ModelState, NetworkConfig, NetworkError, Parameterization};
pub use numerics::{Matrix, NumericsError, Rng};
pub use training::{TrainConfig, TrainError, TrainReport};

/// Union of the module error types.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ntk(#[from] ntk::NtkError),
    #[error(transparent)]
    Ck(#[from] ck::CkError),
    #[error(transparent)]
    Superposition(#[from] superposition::SuperpositionError),
    #[error(transparent)]
    Experiment(#[from] experiments::ExperimentError),
    #[error("{0}")]
    Other(String),
}
