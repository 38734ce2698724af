//! Models and the DP-SGD loop.
//!
//! Each step computes
//!
//! ```text
//! θ ← θ − lr · (Σ_i Σ_j clip(∇L(θ; x_ij)) + η) / b
//! ```
//!
//! where the double sum and the noise `η` are produced by one of four
//! regimes: distributed noise plus secure summation, a trusted aggregator,
//! local DP, or no privacy at all.

pub mod data;
pub mod model;
pub mod train;

use thiserror::Error;

use crate::dpnoise::DpNoiseError;
use crate::fixedpoint::FixedPointError;
use crate::projection::ProjectionError;
use crate::sampling::SamplingError;
use crate::securesum::SecureSumError;

pub use data::{DataConfig, DataSource, Dataset, Partition, PartitionConfig};
pub use model::{FrozenFeatures, Model, ModelKind};
pub use train::{
    dp_sgd_step, per_example_clipped_grads, run_training, CurvePoint, NeighbourRelation, PrivacyConfig,
    ProjectionConfig, Regime, StepObserver, StepView, TrainConfig, TrainOptions, TrainReport, TrustedNoise,
};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite gradient for example {index}")]
    NonFiniteGradient { index: usize },
    #[error("clipped gradient norm {norm} exceeds bound {bound}")]
    ClipInvariant { norm: f64, bound: f64 },
    #[error(transparent)]
    SecureSum(#[from] SecureSumError),
    #[error(transparent)]
    Noise(#[from] DpNoiseError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error("training aborted at step {round}: {cause}")]
    Aborted {
        round: u64,
        cause: Box<LearnerError>,
        partial: Box<TrainReport>,
    },
}
