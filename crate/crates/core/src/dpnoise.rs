//! Distributed Gaussian noise and privacy accounting.
//!
//! Gaussian noise is infinitely divisible: if party `i` adds `N(0, σ_i²)`
//! the aggregate carries `N(0, Σ σ_i²)`. A [`NoisePlan`] picks `σ_i` so the
//! aggregate matches a target `σ` either exactly (trusted execution, no
//! colluders) or robustly against `T` colluders who subtract their shares.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{ln_normal_cdf, normal_cdf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpNoiseError {
    #[error("collusion-robust noise needs N - T - 1 >= 1 (N = {parties}, T = {colluders})")]
    DegenerateCollusion { parties: usize, colluders: usize },
    #[error("distributed noise needs at least two parties, got {0}")]
    TooFewParties(usize),
    #[error("invalid mechanism parameters: {0}")]
    InvalidParams(String),
    #[error("privacy bound diverges for the requested parameters")]
    UnachievableBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// All parties run in trusted execution: `σ_i² = σ²/N`.
    Tee,
    /// Up to `T` colluders: `σ_i² = σ²/(N - T - 1)`.
    CollusionRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub total_sigma: f64,
    pub parties: usize,
    pub colluders: usize,
    pub per_party_sigma: f64,
    pub mode: NoiseMode,
}

pub fn plan_noise(
    sigma: f64,
    parties: usize,
    colluders: usize,
    mode: NoiseMode,
) -> Result<NoisePlan, DpNoiseError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DpNoiseError::InvalidParams(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    if parties < 2 {
        return Err(DpNoiseError::TooFewParties(parties));
    }
    let divisor = match mode {
        NoiseMode::Tee => parties,
        NoiseMode::CollusionRobust => {
            if parties < colluders + 2 {
                return Err(DpNoiseError::DegenerateCollusion { parties, colluders });
            }
            parties - colluders - 1
        }
    };
    Ok(NoisePlan {
        total_sigma: sigma,
        parties,
        colluders: if mode == NoiseMode::Tee { 0 } else { colluders },
        per_party_sigma: sigma / (divisor as f64).sqrt(),
        mode,
    })
}

impl NoisePlan {
    pub fn per_party_variance(&self) -> f64 {
        self.per_party_sigma * self.per_party_sigma
    }

    /// `N σ_i²`.
    pub fn aggregate_variance(&self) -> f64 {
        self.parties as f64 * self.per_party_variance()
    }

    /// Variance left after `removed` parties subtract their own shares.
    pub fn residual_variance(&self, removed: usize) -> f64 {
        self.parties.saturating_sub(removed) as f64 * self.per_party_variance()
    }
}

/// One party's i.i.d. `N(0, σ_i²)` share.
pub fn sample_noise_share<R: Rng + ?Sized>(plan: &NoisePlan, dim: usize, rng: &mut R) -> Vec<f64> {
    gaussian_vector(plan.per_party_sigma, dim, rng)
}

pub fn gaussian_vector<R: Rng + ?Sized>(sigma: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Parameters of a (possibly subsampled) composed Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    pub clip_norm: f64,
    /// `σ / C`.
    pub noise_multiplier: f64,
    pub delta: f64,
    pub steps: u64,
    pub sampling_fraction: f64,
}

impl MechanismParams {
    pub fn validate(&self) -> Result<(), DpNoiseError> {
        if !(self.clip_norm > 0.0) {
            return Err(DpNoiseError::InvalidParams("clip_norm must be positive".into()));
        }
        if !(self.noise_multiplier > 0.0) {
            return Err(DpNoiseError::InvalidParams("noise_multiplier must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpNoiseError::InvalidParams("delta must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.sampling_fraction) {
            return Err(DpNoiseError::InvalidParams("sampling_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }
}

/// Converts mechanism parameters to an `ε` at the parameters' `δ`.
pub trait PrivacyAccountant: Send + Sync {
    fn name(&self) -> &'static str;
    fn epsilon(&self, params: &MechanismParams) -> Result<f64, DpNoiseError>;
}

/// Built-in accountant. `steps` Gaussian mechanisms with noise multiplier
/// `z` compose exactly to one Gaussian mechanism with multiplier `z/√steps`;
/// `ε` is then the tight analytic value for that mechanism. Subsampling
/// amplification is ignored, which can only overstate `ε`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianCompositionAccountant;

impl PrivacyAccountant for GaussianCompositionAccountant {
    fn name(&self) -> &'static str {
        "gaussian-composition"
    }

    fn epsilon(&self, params: &MechanismParams) -> Result<f64, DpNoiseError> {
        params.validate()?;
        if params.steps == 0 || params.sampling_fraction == 0.0 {
            return Ok(0.0);
        }
        let mu = (params.steps as f64).sqrt() / params.noise_multiplier;
        analytic_gaussian_epsilon(mu, params.delta)
    }
}

/// `δ(ε)` of a Gaussian mechanism with sensitivity-to-noise ratio `μ`.
pub fn gaussian_delta(mu: f64, epsilon: f64) -> f64 {
    let a = normal_cdf(mu / 2.0 - epsilon / mu);
    let b = (epsilon + ln_normal_cdf(-mu / 2.0 - epsilon / mu)).exp();
    (a - b).max(0.0)
}

/// Smallest `ε ≥ 0` with `δ(ε) ≤ δ`.
pub fn analytic_gaussian_epsilon(mu: f64, delta: f64) -> Result<f64, DpNoiseError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(DpNoiseError::UnachievableBudget);
    }
    if gaussian_delta(mu, 0.0) <= delta {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while gaussian_delta(mu, hi) > delta {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(DpNoiseError::UnachievableBudget);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gaussian_delta(mu, mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(hi)
}

pub fn account_privacy(params: &MechanismParams) -> Result<f64, DpNoiseError> {
    GaussianCompositionAccountant.epsilon(params)
}

/// Smallest noise multiplier (to relative 1e-9) for which `accountant`
/// reports at most `target_epsilon`.
pub fn noise_multiplier_for_epsilon(
    accountant: &dyn PrivacyAccountant,
    target_epsilon: f64,
    template: MechanismParams,
) -> Result<f64, DpNoiseError> {
    if !(target_epsilon > 0.0) {
        return Err(DpNoiseError::InvalidParams("target epsilon must be positive".into()));
    }
    let eps_at = |z: f64| accountant.epsilon(&MechanismParams { noise_multiplier: z, ..template });
    let mut hi = 1.0;
    while eps_at(hi)? > target_epsilon {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(DpNoiseError::UnachievableBudget);
        }
    }
    let mut lo = hi / 2.0;
    while lo > 1e-9 && eps_at(lo)? <= target_epsilon {
        lo /= 2.0;
    }
    while (hi - lo) > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Stable result-file record of a noise plan and its accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub sigma: f64,
    #[serde(rename = "N")]
    pub parties: usize,
    #[serde(rename = "T")]
    pub colluders: usize,
    pub mode: NoiseMode,
    pub sigma_i: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub steps: u64,
}
