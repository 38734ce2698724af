//! Multi-party experiment orchestration.

pub mod adversary;
pub mod aggregator;
pub mod bench;
pub mod config;
pub mod experiment;
pub mod transcript;
pub mod transport;

use thiserror::Error;

use crate::dpnoise::DpNoiseError;
use crate::learner::LearnerError;
use crate::mixnet::MixnetError;
use crate::sampling::SamplingError;
use crate::securesum::SecureSumError;

pub use aggregator::{MessageTamper, TransportAggregator, AGGREGATOR_ID, NODE_BASE};
pub use config::{inject_adversary, Behavior, ExperimentConfig, PartySpec, Role};
pub use experiment::{execute, run_experiment, AdversaryReport, ExperimentResult, ExperimentRun, Outcome};
pub use transcript::Transcript;
pub use transport::{MemoryNetwork, Network, TcpNetwork, TransportKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("unknown adversary behavior {0:?}")]
    UnknownBehavior(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    SecureSum(#[from] SecureSumError),
    #[error(transparent)]
    Mixnet(#[from] MixnetError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Noise(#[from] DpNoiseError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}
