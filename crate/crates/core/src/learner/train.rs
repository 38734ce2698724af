//! The DP-SGD training loop and its four regimes.

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpnoise::{
    gaussian_vector, noise_multiplier_for_epsilon, plan_noise, GaussianCompositionAccountant, MechanismParams,
    NoiseMode, NoisePlan, PlanSummary, PrivacyAccountant,
};
use crate::fixedpoint::{FixedPointCodec, FixedVector};
use crate::keystream::Seed;
use crate::projection::{
    generate_projection, reconstruct, ProjectionMatrix, ProjectionSpec, DEFAULT_DELTA_PRIME,
};
use crate::sampling::{select_batch_poisson, swor_positions, BatchScheme, TokenIndex};
use crate::securesum::{InProcessSummation, ProtocolConfig, SecureSummation, WireMessage};
use crate::timing::{timed, PhaseTimings};

use super::data::{Dataset, Partition};
use super::model::{FrozenFeatures, Model, ModelKind};
use super::LearnerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Distributed noise shares, summed by the secure summation protocol.
    DpSmc,
    /// One trusted party sums plain gradients and adds the noise.
    Trusted,
    /// Every party adds the full noise to its own sum.
    Ldp,
    /// No clipping and no noise.
    Nonprivate,
}

impl Regime {
    pub fn is_private(self) -> bool {
        self != Regime::Nonprivate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighbourRelation {
    /// Clip at `C`.
    #[default]
    RemoveAdd,
    /// Clip at `C/2`, so a substituted example moves the sum by at most `C`.
    Substitute,
}

/// Noise source of the trusted regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustedNoise {
    /// A single central `N(0, σ²)` draw.
    #[default]
    Central,
    /// The sum of the per-party shares a dp_smc run with the same seeds
    /// would draw; makes the trusted run an exact oracle for dp_smc.
    PartyShares,
}

fn default_delta() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    /// `σ / C`; exclusive with `target_epsilon`.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    /// Solve the noise multiplier for this `ε` with the accountant.
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_mode")]
    pub noise_mode: NoiseMode,
    #[serde(default)]
    pub colluders: usize,
}

fn default_mode() -> NoiseMode {
    NoiseMode::Tee
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            noise_multiplier: None,
            target_epsilon: None,
            delta: default_delta(),
            noise_mode: NoiseMode::Tee,
            colluders: 0,
        }
    }
}

fn default_delta_prime() -> f64 {
    DEFAULT_DELTA_PRIME
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub k: usize,
    #[serde(default = "default_delta_prime")]
    pub delta_prime: f64,
    /// Draw a fresh matrix every step (otherwise one matrix for the run).
    #[serde(default = "default_true")]
    pub resample_per_step: bool,
}

fn default_clip() -> f64 {
    1.0
}

fn default_lr() -> f64 {
    0.1
}

fn default_eval_every() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Output width of a frozen random feature map applied to raw inputs.
    #[serde(default)]
    pub frozen_features: Option<usize>,
    pub regime: Regime,
    pub batch: BatchScheme,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub neighbour: NeighbourRelation,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub projection: Option<ProjectionConfig>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub steps: u64,
    /// Evaluate every this many steps (0: only at the end).
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub trusted_noise: TrustedNoise,
    #[serde(default)]
    pub record_trajectory: bool,
}

impl TrainConfig {
    /// Checks everything that does not depend on the data.
    pub fn validate(&self, parties: usize) -> Result<(), LearnerError> {
        let bad = |m: String| Err(LearnerError::InvalidConfig(m));
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if parties == 0 {
            return bad("no parties".into());
        }
        if let Some(m) = self.frozen_features {
            if m != self.model.features() {
                return bad(format!("frozen features emit {m} values, model expects {}", self.model.features()));
            }
        }
        if let BatchScheme::Poisson { gamma } = self.batch {
            if !(gamma > 0.0 && gamma < 1.0) {
                return bad(format!("Poisson rate must lie in (0, 1), got {gamma}"));
            }
        }
        if let Some(p) = &self.projection {
            if p.k == 0 || p.k > self.model.param_count() {
                return bad(format!(
                    "projection dimension {} must lie in 1..={}",
                    p.k,
                    self.model.param_count()
                ));
            }
            if !(p.delta_prime > 0.0 && p.delta_prime < 1.0) {
                return bad(format!("delta' must lie in (0, 1), got {}", p.delta_prime));
            }
        }
        if self.regime.is_private() {
            let pc = &self.privacy;
            match (pc.noise_multiplier, pc.target_epsilon) {
                (Some(z), None) if z > 0.0 && z.is_finite() => {}
                (None, Some(e)) if e > 0.0 && e.is_finite() => {}
                _ => return bad("private regimes need exactly one positive noise_multiplier or target_epsilon".into()),
            }
            if !(pc.delta > 0.0 && pc.delta < 1.0) {
                return bad(format!("delta must lie in (0, 1), got {}", pc.delta));
            }
            let distributed = self.regime == Regime::DpSmc
                || (self.regime == Regime::Trusted && self.trusted_noise == TrustedNoise::PartyShares);
            if distributed {
                plan_noise(1.0, parties, pc.colluders, pc.noise_mode)?;
            }
        }
        Ok(())
    }

    pub fn clip_bound(&self) -> f64 {
        match (self.regime, self.neighbour) {
            (Regime::Nonprivate, _) => f64::INFINITY,
            (_, NeighbourRelation::RemoveAdd) => self.clip_norm,
            (_, NeighbourRelation::Substitute) => self.clip_norm / 2.0,
        }
    }
}

/// Evaluation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub d: usize,
    pub k: usize,
    pub clip_norm: f64,
    pub proj_sensitivity: f64,
    pub delta_prime: f64,
    /// Per-party upload size without projection over the size with it.
    pub upload_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: Regime,
    pub steps_completed: u64,
    pub parameters: usize,
    pub noise_multiplier: Option<f64>,
    /// Standard deviation of the total noise on the released sum.
    pub aggregate_noise_std: f64,
    pub noise_plan: Option<PlanSummary>,
    pub accountant: String,
    pub epsilon: Option<f64>,
    /// Includes the projection slack of every step.
    pub delta: Option<f64>,
    pub sampling_fraction: f64,
    pub projection: Option<ProjectionSummary>,
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
    pub uploaded_bytes: u64,
    pub timings: PhaseTimings,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// What an observer sees after each step's aggregation.
pub struct StepView<'a> {
    pub round: u64,
    pub batch_sizes: &'a [usize],
    /// Per-party noise shares (empty when the regime draws none).
    pub noise_shares: &'a [Vec<f64>],
    /// Noisy sum as released, before reconstruction and normalization.
    pub released: &'a [f64],
}

pub trait StepObserver {
    fn on_step(&mut self, view: &StepView<'_>);
}

/// Everything besides the configuration and data that a run may need.
pub struct TrainOptions<'a> {
    pub seed: Seed,
    pub codec: FixedPointCodec,
    /// Secure summation back end for dp_smc; an in-process pairwise
    /// protocol when absent.
    pub summation: Option<&'a mut dyn SecureSummation>,
    /// Shared token list for SWOR; a simulated list when absent.
    pub tokens: Option<&'a TokenIndex>,
    pub accountant: &'a dyn PrivacyAccountant,
    pub observer: Option<&'a mut dyn StepObserver>,
}

impl<'a> TrainOptions<'a> {
    pub fn new(seed: Seed) -> Self {
        Self {
            seed,
            codec: FixedPointCodec::default(),
            summation: None,
            tokens: None,
            accountant: &GaussianCompositionAccountant,
            observer: None,
        }
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` onto the ball of radius `bound`; gradients inside are unchanged.
fn clip_in_place(g: &mut [f64], bound: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > bound {
        let s = bound / norm;
        g.iter_mut().for_each(|x| *x *= s);
        bound
    } else {
        norm
    }
}

/// Per-example gradients at the given (featurized) rows, clipped to `bound`.
pub fn per_example_clipped_grads(
    model: &Model,
    data: &Dataset,
    rows: &[usize],
    bound: f64,
) -> Result<Vec<Vec<f64>>, LearnerError> {
    rows.iter()
        .map(|&i| {
            let mut g = vec![0.0; model.dim()];
            model.loss_and_grad(data.x(i), data.y(i), &mut g);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(LearnerError::NonFiniteGradient { index: i });
            }
            clip_in_place(&mut g, bound);
            Ok(g)
        })
        .collect()
}

// Sum of clipped gradients without materializing each one.
fn clipped_grad_sum(model: &Model, data: &Dataset, rows: &[usize], bound: f64) -> Result<Vec<f64>, LearnerError> {
    let mut sum = vec![0.0; model.dim()];
    let mut g = vec![0.0; model.dim()];
    for &i in rows {
        model.loss_and_grad(data.x(i), data.y(i), &mut g);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(LearnerError::NonFiniteGradient { index: i });
        }
        let norm = clip_in_place(&mut g, bound);
        if norm > bound * (1.0 + 1e-9) {
            return Err(LearnerError::ClipInvariant { norm, bound });
        }
        sum.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
    }
    Ok(sum)
}

/// `θ ← θ − lr · noisy_sum / normalizer`.
pub fn dp_sgd_step(model: &mut Model, noisy_sum: &[f64], normalizer: f64, lr: f64) {
    assert_eq!(noisy_sum.len(), model.dim());
    let scale = lr / normalizer;
    model.theta.iter_mut().zip(noisy_sum).for_each(|(t, g)| *t -= scale * g);
}

fn evaluate(model: &Model, train: &Dataset, test: Option<&Dataset>, step: u64) -> CurvePoint {
    let stats = |d: &Dataset| -> (f64, f64) {
        let (loss, correct) = (0..d.len())
            .into_par_iter()
            .map(|i| (model.loss(d.x(i), d.y(i)), (model.predict(d.x(i)) == d.y(i)) as usize))
            .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let n = d.len().max(1) as f64;
        (loss / n, correct as f64 / n)
    };
    let (train_loss, train_accuracy) = stats(train);
    CurvePoint {
        step,
        train_loss,
        train_accuracy,
        test_accuracy: test.filter(|t| !t.is_empty()).map(|t| stats(t).1),
    }
}

struct NoiseSetup {
    multiplier: Option<f64>,
    sensitivity: f64,
    plan: Option<NoisePlan>,
    epsilon: Option<f64>,
    delta: Option<f64>,
}

/// Runs the configured regime end to end. `train` and `test` hold raw rows;
/// `partition` assigns the rows of `train` to parties.
pub fn run_training(
    config: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    partition: &Partition,
    mut options: TrainOptions<'_>,
) -> Result<TrainReport, LearnerError> {
    let parties = partition.parties();
    config.validate(parties)?;
    let seed = options.seed;
    if partition.total() != train.len() {
        return Err(LearnerError::InvalidConfig(format!(
            "partition covers {} rows, training set has {}",
            partition.total(),
            train.len()
        )));
    }
    let n = train.len();
    if let BatchScheme::Swor { b } = config.batch {
        if b == 0 || b > n {
            return Err(LearnerError::InvalidConfig(format!("SWOR batch size {b} must lie in 1..={n}")));
        }
    }
    if train.classes() > config.model.classes() {
        return Err(LearnerError::InvalidConfig(format!(
            "data has {} classes, model has {}",
            train.classes(),
            config.model.classes()
        )));
    }

    let frozen = config
        .frozen_features
        .map(|m| FrozenFeatures::generate(train.dim(), m, &seed.derive("frozen-features", &[])));
    let mut model = Model::init(config.model.clone(), frozen, &seed.derive("model-init", &[]))?;
    let (train, test) = match &model.frozen {
        Some(f) => (train.map_rows(|x| f.apply(x)), test.map(|t| t.map_rows(|x| f.apply(x)))),
        None => (train.clone(), test.cloned()),
    };
    if train.dim() != config.model.features() {
        return Err(LearnerError::InvalidConfig(format!(
            "data has {} features, model expects {}",
            train.dim(),
            config.model.features()
        )));
    }
    let test = test.as_ref();
    let d = model.dim();

    let sampling_fraction = config.batch.sampling_fraction(n).min(1.0);
    let normalizer = config.batch.normalizer(n);

    let projection = match &config.projection {
        Some(p) => Some(ProjectionSpec::new(
            d,
            p.k,
            seed.derive("projection", &[]),
            config.clip_norm,
            p.delta_prime,
        )?),
        None => None,
    };
    let wire_dim = projection.map_or(d, |p| p.k);

    let noise = noise_setup(config, parties, sampling_fraction, projection.as_ref(), options.accountant)?;
    let total_sigma = noise.multiplier.map_or(0.0, |z| z * noise.sensitivity);
    info!(
        "training {:?}: N = {parties}, n = {n}, d = {d}, steps = {}, sigma = {total_sigma}",
        config.regime, config.steps
    );

    let simulated;
    let tokens = match (config.batch, options.tokens) {
        (BatchScheme::Poisson { .. }, _) => None,
        (_, Some(t)) => Some(t),
        (_, None) => {
            simulated = TokenIndex::simulated(&partition.counts(), &seed.derive("tokens", &[]));
            Some(&simulated)
        }
    };
    if let Some(t) = tokens {
        if t.list().len() != n || t.parties() != parties {
            return Err(LearnerError::InvalidConfig(format!(
                "token list covers {} samples of {} parties, data has {n} samples of {parties} parties",
                t.list().len(),
                t.parties()
            )));
        }
    }

    let mut default_backend;
    let backend: Option<&mut dyn SecureSummation> = if config.regime == Regime::DpSmc {
        match options.summation.take() {
            Some(b) => Some(b),
            None => {
                let roster: Vec<u32> = (0..parties as u32).collect();
                default_backend = InProcessSummation::new(
                    &ProtocolConfig::Pairwise { group_size: None },
                    &roster,
                    &seed.derive("mask", &[]),
                    options.codec,
                )?;
                Some(&mut default_backend)
            }
        }
    } else {
        None
    };
    let mut backend = backend;

    let mut report = TrainReport {
        regime: config.regime,
        steps_completed: 0,
        parameters: d,
        noise_multiplier: noise.multiplier,
        aggregate_noise_std: match config.regime {
            Regime::Nonprivate => 0.0,
            Regime::Ldp => total_sigma * (parties as f64).sqrt(),
            Regime::DpSmc => noise.plan.map_or(0.0, |p| p.aggregate_variance().sqrt()),
            Regime::Trusted => match noise.plan {
                Some(p) if config.trusted_noise == TrustedNoise::PartyShares => p.aggregate_variance().sqrt(),
                _ => total_sigma,
            },
        },
        noise_plan: noise.plan.map(|p| PlanSummary {
            sigma: p.total_sigma,
            parties: p.parties,
            colluders: p.colluders,
            mode: p.mode,
            sigma_i: p.per_party_sigma,
            epsilon: noise.epsilon.unwrap_or(0.0),
            delta: noise.delta.unwrap_or(0.0),
            steps: config.steps,
        }),
        accountant: options.accountant.name().to_string(),
        epsilon: noise.epsilon,
        delta: noise.delta,
        sampling_fraction,
        projection: projection.map(|p| ProjectionSummary {
            d,
            k: p.k,
            clip_norm: p.clip_norm,
            proj_sensitivity: p.proj_sensitivity,
            delta_prime: p.delta_prime,
            upload_reduction: WireMessage::encoded_len(options.codec, d) as f64
                / WireMessage::encoded_len(options.codec, p.k) as f64,
        }),
        curve: Vec::new(),
        final_loss: f64::NAN,
        final_train_accuracy: f64::NAN,
        final_test_accuracy: None,
        uploaded_bytes: 0,
        timings: PhaseTimings::default(),
        theta: Vec::new(),
        trajectory: config.record_trajectory.then(Vec::new),
    };

    let joint_seed = seed.derive("batch", &[]);
    let bound = config.clip_bound();
    let mut fixed_matrix: Option<ProjectionMatrix> = None;

    for round in 0..config.steps {
        if config.eval_every > 0 && round % config.eval_every == 0 {
            report.curve.push(evaluate(&model, &train, test, round));
        }
        let step = run_step(StepInputs {
            config,
            model: &model,
            train: &train,
            partition,
            round,
            tokens,
            joint_seed: &joint_seed,
            bound,
            noise: &noise,
            projection: projection.as_ref(),
            fixed_matrix: &mut fixed_matrix,
            seed: &seed,
            codec: options.codec,
            backend: backend.as_deref_mut(),
            wire_dim,
        });
        let step = match step {
            Ok(s) => s,
            Err(cause) => {
                report.theta = model.theta.clone();
                let last = evaluate(&model, &train, test, round);
                report.final_loss = last.train_loss;
                report.final_train_accuracy = last.train_accuracy;
                report.final_test_accuracy = last.test_accuracy;
                return Err(LearnerError::Aborted {
                    round,
                    cause: Box::new(cause),
                    partial: Box::new(report),
                });
            }
        };
        report.timings += step.timings;
        report.uploaded_bytes += step.uploaded_bytes;
        if let Some(obs) = options.observer.as_deref_mut() {
            obs.on_step(&StepView {
                round,
                batch_sizes: &step.batch_sizes,
                noise_shares: &step.noise_shares,
                released: &step.released,
            });
        }
        dp_sgd_step(&mut model, &step.update, normalizer, config.learning_rate);
        report.steps_completed = round + 1;
        if let Some(traj) = report.trajectory.as_mut() {
            traj.push(model.theta.clone());
        }
        debug!("step {round}: batch {:?}", step.batch_sizes);
    }

    let last = evaluate(&model, &train, test, config.steps);
    report.final_loss = last.train_loss;
    report.final_train_accuracy = last.train_accuracy;
    report.final_test_accuracy = last.test_accuracy;
    if report.curve.last().map(|c| c.step) != Some(config.steps) {
        report.curve.push(last);
    }
    report.theta = model.theta;
    Ok(report)
}

fn noise_setup(
    config: &TrainConfig,
    parties: usize,
    sampling_fraction: f64,
    projection: Option<&ProjectionSpec>,
    accountant: &dyn PrivacyAccountant,
) -> Result<NoiseSetup, LearnerError> {
    if !config.regime.is_private() {
        return Ok(NoiseSetup {
            multiplier: None,
            sensitivity: 0.0,
            plan: None,
            epsilon: None,
            delta: None,
        });
    }
    let pc = &config.privacy;
    // the released query has sensitivity C, or C~ once projected
    let sensitivity = projection.map_or(config.clip_norm, |p| p.proj_sensitivity);
    let template = MechanismParams {
        clip_norm: sensitivity,
        noise_multiplier: 1.0,
        delta: pc.delta,
        steps: config.steps,
        sampling_fraction,
    };
    let multiplier = match (pc.noise_multiplier, pc.target_epsilon) {
        (Some(z), _) => z,
        (None, Some(eps)) => noise_multiplier_for_epsilon(accountant, eps, template)?,
        (None, None) => unreachable!("validated"),
    };
    let params = MechanismParams {
        noise_multiplier: multiplier,
        ..template
    };
    let epsilon = accountant.epsilon(&params)?;
    let delta = pc.delta + projection.map_or(0.0, |p| p.delta_prime * config.steps as f64);
    let distributed = config.regime == Regime::DpSmc
        || (config.regime == Regime::Trusted && config.trusted_noise == TrustedNoise::PartyShares);
    let plan = if distributed {
        Some(plan_noise(params.sigma(), parties, pc.colluders, pc.noise_mode)?)
    } else {
        None
    };
    Ok(NoiseSetup {
        multiplier: Some(multiplier),
        sensitivity,
        plan,
        epsilon: Some(epsilon),
        delta: Some(delta),
    })
}

struct StepInputs<'s, 'b, 'o> {
    config: &'s TrainConfig,
    model: &'s Model,
    train: &'s Dataset,
    partition: &'s Partition,
    round: u64,
    tokens: Option<&'s TokenIndex>,
    joint_seed: &'s Seed,
    bound: f64,
    noise: &'s NoiseSetup,
    projection: Option<&'s ProjectionSpec>,
    fixed_matrix: &'s mut Option<ProjectionMatrix>,
    seed: &'s Seed,
    codec: FixedPointCodec,
    backend: Option<&'b mut (dyn SecureSummation + 'o)>,
    wire_dim: usize,
}

struct StepOutput {
    batch_sizes: Vec<usize>,
    noise_shares: Vec<Vec<f64>>,
    released: Vec<f64>,
    update: Vec<f64>,
    timings: PhaseTimings,
    uploaded_bytes: u64,
}

fn run_step(s: StepInputs<'_, '_, '_>) -> Result<StepOutput, LearnerError> {
    let config = s.config;
    let parties = s.partition.parties();
    let round = s.round;

    // Batch rows per party, as global row indices.
    let batches: Vec<Vec<usize>> = match config.batch {
        BatchScheme::Swor { b } => {
            let positions = swor_positions(s.train.len(), b, s.joint_seed, round)?;
            let tokens = s.tokens.expect("SWOR runs hold a token index");
            (0..parties)
                .map(|p| {
                    let start = s.partition.range(p).start;
                    tokens.local_batch(p, &positions).into_iter().map(|i| start + i).collect()
                })
                .collect()
        }
        BatchScheme::Poisson { gamma } => (0..parties)
            .map(|p| {
                let range = s.partition.range(p);
                let mut rng = s.seed.derive("batch-poisson", &[p as u64, round]).rng();
                select_batch_poisson(range.len(), gamma, &mut rng)
                    .map(|local| local.into_iter().map(|i| range.start + i).collect())
            })
            .collect::<Result<_, _>>()?,
    };

    let matrix = match s.projection {
        None => None,
        Some(spec) if config.projection.is_some_and(|p| p.resample_per_step) => {
            Some(generate_projection(&spec.for_round(round))?)
        }
        Some(spec) => {
            if s.fixed_matrix.is_none() {
                *s.fixed_matrix = Some(generate_projection(spec)?);
            }
            s.fixed_matrix.clone()
        }
    };

    // Per-party sums and noise shares, computed independently per party.
    let share_sigma = match config.regime {
        Regime::DpSmc => s.noise.plan.map_or(0.0, |p| p.per_party_sigma),
        Regime::Trusted if config.trusted_noise == TrustedNoise::PartyShares => {
            s.noise.plan.map_or(0.0, |p| p.per_party_sigma)
        }
        Regime::Ldp => s.noise.multiplier.unwrap_or(0.0) * s.noise.sensitivity,
        _ => 0.0,
    };
    let draws_shares = share_sigma > 0.0;
    let (parts, gradient_secs) = timed(|| {
        (0..parties)
            .into_par_iter()
            .map(|p| -> Result<(Vec<f64>, Vec<f64>), LearnerError> {
                let sum = clipped_grad_sum(s.model, s.train, &batches[p], s.bound)?;
                let sum = match &matrix {
                    Some(m) => m.project(&sum)?,
                    None => sum,
                };
                let share = if draws_shares {
                    let mut rng = s.seed.derive("noise", &[p as u64, round]).rng();
                    gaussian_vector(share_sigma, s.wire_dim, &mut rng)
                } else {
                    Vec::new()
                };
                Ok((sum, share))
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let parts = parts?;
    let mut timings = PhaseTimings {
        gradient: gradient_secs,
        ..PhaseTimings::default()
    };

    let contributions: Vec<Vec<f64>> = parts
        .iter()
        .map(|(sum, share)| {
            if share.is_empty() {
                sum.clone()
            } else {
                sum.iter().zip(share).map(|(a, b)| a + b).collect()
            }
        })
        .collect();
    let noise_shares: Vec<Vec<f64>> = parts.into_iter().map(|(_, share)| share).collect();

    let mut uploaded_bytes = (parties * WireMessage::encoded_len(s.codec, s.wire_dim)) as u64;
    let released = match config.regime {
        Regime::DpSmc => {
            let backend = s.backend.expect("dp_smc runs hold a summation back end");
            let (encoded, encode_secs) = timed(|| {
                contributions
                    .iter()
                    .map(|c| s.codec.encode_clipped(c))
                    .collect::<Vec<FixedVector>>()
            });
            let outcome = backend.sum_round(round, &encoded)?;
            timings += outcome.timings;
            timings.mask += encode_secs;
            uploaded_bytes = outcome.uploaded_bytes as u64;
            s.codec.decode(&outcome.sum)
        }
        _ => {
            let mut total = vec![0.0; s.wire_dim];
            for c in &contributions {
                total.iter_mut().zip(c).for_each(|(t, x)| *t += x);
            }
            if config.regime == Regime::Trusted && config.trusted_noise == TrustedNoise::Central {
                let sigma = s.noise.multiplier.unwrap_or(0.0) * s.noise.sensitivity;
                let mut rng = s.seed.derive("noise-central", &[round]).rng();
                let eta = gaussian_vector(sigma, s.wire_dim, &mut rng);
                total.iter_mut().zip(&eta).for_each(|(t, e)| *t += e);
            }
            total
        }
    };

    let update = match &matrix {
        Some(m) => reconstruct(&released, m)?,
        None => released.clone(),
    };
    Ok(StepOutput {
        batch_sizes: batches.iter().map(Vec::len).collect(),
        noise_shares,
        released,
        update,
        timings,
        uploaded_bytes,
    })
}
