//! End-to-end experiment: setup, token list, training, persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dpnoise::{plan_noise, GaussianCompositionAccountant};
use crate::learner::{run_training, Dataset, LearnerError, Partition, StepObserver, TrainOptions, TrainReport};
use crate::mixnet::{create_token_list, roster_hash, KeyPair, MixParty, PublicKeyScheme, SimSealedBox, TokenFile};
use crate::sampling::{
    effective_fraction_poisson, effective_fraction_swor, party_tokens, AmplificationQuery, BatchScheme, TokenIndex,
};
use crate::securesum::{InProcessSummation, SecureSumError, SecureSummation};
use crate::timing::PhaseTimings;

use super::adversary::{AuditedSummation, DropToken, RevealNoiseShare, SubstituteMessage, SumDeviation};
use super::aggregator::{MessageTamper, TransportAggregator};
use super::config::{Behavior, ExperimentConfig, PartySpec, Role, TokenListMode};
use super::transcript::{Transcript, TranscriptEntry};
use super::HarnessError;

/// Default substitution offset: one unit in the last fractional place.
const DEFAULT_SUBSTITUTION_OFFSET: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Aborted {
        phase: String,
        round: Option<u64>,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenListSummary {
    pub mode: TokenListMode,
    pub size: usize,
    /// Hex roster hash, when the list came from a mixnet run or a file.
    pub roster_hash: Option<String>,
}

/// Worst-case sampling fraction of an honest sample given the data held
/// by malicious parties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSampling {
    pub nominal: f64,
    pub effective: f64,
    pub slack: f64,
    pub honest_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub messages: usize,
    pub bytes: usize,
    pub head: Option<String>,
    pub verified: bool,
    /// Every round had the same message count and sizes.
    pub uniform_rounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum AdversaryReport {
    RevealNoiseShare {
        parties: Vec<u32>,
        predicted_residual_variance: f64,
        measured_residual_variance: Option<f64>,
        samples: u64,
    },
    SubstituteMessage {
        parties: Vec<u32>,
        offset: u64,
        deviations: Vec<SumDeviation>,
    },
    DropToken {
        parties: Vec<u32>,
        detected: bool,
    },
    ObserveAll {
        parties: Vec<u32>,
        messages_observed: usize,
        uniform_rounds: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub name: String,
    pub config: ExperimentConfig,
    #[serde(flatten)]
    pub outcome: Outcome,
    pub report: Option<TrainReport>,
    pub token_list: Option<TokenListSummary>,
    pub effective_sampling: Option<EffectiveSampling>,
    pub transcript: Option<TranscriptSummary>,
    pub adversary: Vec<AdversaryReport>,
    pub timings: PhaseTimings,
}

impl ExperimentResult {
    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// `step,train_loss,train_accuracy,test_accuracy`; empty test cells when
    /// there is no test set.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,train_loss,train_accuracy,test_accuracy\n");
        if let Some(r) = &self.report {
            for p in &r.curve {
                let test = p.test_accuracy.map_or(String::new(), |a| a.to_string());
                out.push_str(&format!("{},{},{},{}\n", p.step, p.train_loss, p.train_accuracy, test));
            }
        }
        out
    }

    /// Writes `result.json`, `curve.csv` and, for networked runs,
    /// `transcript.json` under `dir`.
    pub fn write(&self, dir: &Path, transcript: Option<&Transcript>) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(dir)?;
        let mut written = vec![dir.join("result.json"), dir.join("curve.csv")];
        fs::write(&written[0], self.to_json())?;
        fs::write(&written[1], self.curve_csv())?;
        if let Some(t) = transcript {
            let path = dir.join("transcript.json");
            let json = serde_json::to_string_pretty(t.entries()).map_err(|e| HarnessError::Io(e.to_string()))?;
            fs::write(&path, json)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// A finished run plus the message log, when the run used a network.
pub struct ExperimentRun {
    pub result: ExperimentResult,
    pub transcript: Option<Transcript>,
}

fn mixnet_keys(config: &ExperimentConfig, clients: &[PartySpec]) -> Vec<KeyPair> {
    let scheme = SimSealedBox;
    clients
        .iter()
        .map(|c| {
            let mut rng = config.seeds.mixnet().derive("keys", &[c.id as u64]).rng();
            scheme.generate(c.id, &mut rng)
        })
        .collect()
}

fn client_tokens(config: &ExperimentConfig, counts: &[usize]) -> Vec<Vec<crate::mixnet::Token>> {
    let seed = config.seeds.tokens();
    counts
        .iter()
        .enumerate()
        .map(|(p, &c)| party_tokens(&seed.derive("party-tokens", &[p as u64]), c))
        .collect()
}

fn roster_digest(clients: &[PartySpec], counts: &[usize], keys: &[KeyPair]) -> [u8; 32] {
    roster_hash(
        clients
            .iter()
            .zip(counts)
            .zip(keys)
            .map(|((c, &n), k)| (c.id, n, k.public_key.as_slice())),
    )
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the mixnet over the clients' tokens. `Ok(Err(_))` is a detected
/// protocol abort rather than a setup failure.
pub fn build_token_list(
    config: &ExperimentConfig,
    counts: &[usize],
) -> Result<(TokenFile, TokenIndex), HarnessError> {
    let clients = config.clients();
    let keys = mixnet_keys(config, &clients);
    let tokens = client_tokens(config, counts);
    let parties: Vec<MixParty> = keys
        .iter()
        .cloned()
        .zip(tokens.iter().cloned())
        .map(|(keys, tokens)| MixParty { keys, tokens })
        .collect();
    let mut rngs: Vec<Box<dyn RngCore + Send>> = clients
        .iter()
        .map(|c| Box::new(config.seeds.mixnet().derive("mix", &[c.id as u64]).rng()) as Box<dyn RngCore + Send>)
        .collect();
    let droppers = config.targets(Behavior::DropToken);
    let tamper = droppers
        .first()
        .and_then(|id| clients.iter().position(|c| c.id == *id))
        .map(|position| DropToken { position });
    let list = create_token_list(
        &SimSealedBox,
        &parties,
        &mut rngs,
        tamper.as_ref().map(|t| t as &dyn crate::mixnet::MixTamper),
    )?;
    let list = list.tokens()?;
    let file = TokenFile {
        parties: clients.len() as u32,
        roster_hash: roster_digest(&clients, counts, &keys),
        tokens: list.clone(),
    };
    let index = TokenIndex::new(list, &tokens)?;
    Ok((file, index))
}

fn load_token_list(config: &ExperimentConfig, path: &Path, counts: &[usize]) -> Result<(TokenFile, TokenIndex), HarnessError> {
    let file = TokenFile::read(path)?;
    let clients = config.clients();
    let keys = mixnet_keys(config, &clients);
    file.check_roster(&roster_digest(&clients, counts, &keys))?;
    let tokens = client_tokens(config, counts);
    let index = TokenIndex::new(file.tokens.clone(), &tokens)?;
    Ok((file, index))
}

/// Training and test data with the partition over clients.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset, Partition), HarnessError> {
    let (train, test) = config.data.load(&config.seeds.data())?;
    let clients = config.clients();
    let partition = if clients.iter().all(|c| c.samples.is_some()) {
        let mut start = 0;
        let ranges = clients
            .iter()
            .map(|c| {
                let r = start..start + c.samples.unwrap_or(0);
                start = r.end;
                r
            })
            .collect();
        Partition::explicit(ranges, train.len())?
    } else {
        Partition::from_config(&config.partition, train.len(), clients.len())?
    };
    Ok((train, test, partition))
}

fn effective_sampling(config: &ExperimentConfig, partition: &Partition) -> Result<EffectiveSampling, HarnessError> {
    let clients = config.clients();
    let counts = partition.counts();
    let n = partition.total();
    let honest_samples: usize = clients
        .iter()
        .zip(&counts)
        .filter(|(c, _)| c.role != Role::Malicious)
        .map(|(_, &k)| k)
        .sum();
    let nominal = config.train.batch.sampling_fraction(n).min(1.0);
    let effective = match config.train.batch {
        BatchScheme::Poisson { gamma } => effective_fraction_poisson(gamma)?,
        BatchScheme::Swor { b } if honest_samples > 0 => effective_fraction_swor(&AmplificationQuery {
            n,
            n_honest: honest_samples,
            b,
            delta_slack: config.amplification_slack,
        })?,
        BatchScheme::Swor { .. } => 1.0,
    };
    Ok(EffectiveSampling {
        nominal,
        effective,
        slack: config.amplification_slack,
        honest_samples,
    })
}

fn summarize(transcript: &Transcript) -> TranscriptSummary {
    let entries = transcript.entries();
    let mut rounds: Vec<u64> = entries.iter().map(|e| e.round).collect();
    rounds.dedup();
    let shapes: Vec<_> = rounds.iter().map(|&r| transcript.round_shape(r)).collect();
    TranscriptSummary {
        messages: entries.len(),
        bytes: entries.iter().map(|e| e.bytes).sum(),
        head: transcript.head().map(str::to_string),
        verified: transcript.verify(),
        uniform_rounds: shapes.windows(2).all(|w| w[0] == w[1]),
    }
}

fn abort_phase(e: &LearnerError) -> String {
    match e {
        LearnerError::SecureSum(SecureSumError::IncompleteRound { phase, .. }) => phase.to_string(),
        LearnerError::SecureSum(SecureSumError::Transport(_)) => "transport".into(),
        LearnerError::SecureSum(_) => "secure summation".into(),
        LearnerError::NonFiniteGradient { .. } | LearnerError::ClipInvariant { .. } => "gradient".into(),
        _ => "training".into(),
    }
}

/// Validates, runs and returns the result; writes nothing.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentRun, HarnessError> {
    config.validate()?;
    let clients = config.clients();
    let client_ids: Vec<u32> = clients.iter().map(|c| c.id).collect();
    let (train, test, partition) = prepare_data(config)?;
    let counts = partition.counts();
    info!(
        "experiment {}: {} clients, {} training rows, protocol {}",
        config.name,
        clients.len(),
        train.len(),
        config.protocol.name()
    );

    let mut result = ExperimentResult {
        schema_version: super::config::SCHEMA_VERSION,
        name: config.name.clone(),
        config: config.clone(),
        outcome: Outcome::Completed,
        report: None,
        token_list: None,
        effective_sampling: Some(effective_sampling(config, &partition)?),
        transcript: None,
        adversary: Vec::new(),
        timings: PhaseTimings::default(),
    };

    let swor = matches!(config.train.batch, BatchScheme::Swor { .. });
    let tokens = if !swor {
        None
    } else {
        match config.token_list.mode {
            TokenListMode::Simulate => {
                let index = TokenIndex::simulated(&counts, &config.seeds.tokens());
                result.token_list = Some(TokenListSummary {
                    mode: TokenListMode::Simulate,
                    size: index.list().len(),
                    roster_hash: None,
                });
                Some(index)
            }
            mode => {
                let built = match mode {
                    TokenListMode::File => {
                        let path = config.token_list.path.as_deref().expect("validated");
                        load_token_list(config, path, &counts)
                    }
                    _ => build_token_list(config, &counts),
                };
                let droppers = config.targets(Behavior::DropToken);
                match built {
                    Ok((file, index)) => {
                        if !droppers.is_empty() {
                            result.adversary.push(AdversaryReport::DropToken {
                                parties: droppers,
                                detected: false,
                            });
                        }
                        result.token_list = Some(TokenListSummary {
                            mode,
                            size: file.tokens.len(),
                            roster_hash: Some(hex(&file.roster_hash)),
                        });
                        Some(index)
                    }
                    Err(HarnessError::Mixnet(e)) => {
                        warn!("token list creation aborted: {e}");
                        if !droppers.is_empty() {
                            result.adversary.push(AdversaryReport::DropToken {
                                parties: droppers,
                                detected: matches!(e, crate::mixnet::MixnetError::Tampered { .. }),
                            });
                        }
                        result.outcome = Outcome::Aborted {
                            phase: "token list".into(),
                            round: None,
                            error: e.to_string(),
                        };
                        return Ok(ExperimentRun {
                            result,
                            transcript: None,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    };

    let timeout = Duration::from_millis(config.timeout_ms);
    let network = config.transport.network();
    let mut networked = match &network {
        Some(net) => {
            let mut agg = TransportAggregator::new(
                &config.protocol,
                &client_ids,
                &config.seeds.mask(),
                config.codec,
                net.as_ref(),
                timeout,
            )?;
            let substitutes = config.targets(Behavior::SubstituteMessage);
            if !substitutes.is_empty() {
                let tamper: Arc<dyn MessageTamper> =
                    Arc::new(SubstituteMessage::new(substitutes.iter().copied(), substitution_offset(config)));
                agg = agg.with_tamper(tamper);
            }
            Some(agg)
        }
        None => None,
    };
    let mut local = match networked {
        Some(_) => None,
        None => Some(InProcessSummation::new(
            &config.protocol,
            &client_ids,
            &config.seeds.mask(),
            config.codec,
        )?),
    };
    let inner: &mut dyn SecureSummation = match (&mut networked, &mut local) {
        (Some(n), _) => n,
        (None, Some(l)) => l,
        (None, None) => unreachable!("one back end is always built"),
    };
    let mut audited = AuditedSummation::new(inner);

    let revealers = config.targets(Behavior::RevealNoiseShare);
    let mut observer = (!revealers.is_empty()).then(|| {
        RevealNoiseShare::new(
            revealers
                .iter()
                .filter_map(|id| client_ids.iter().position(|c| c == id)),
        )
    });

    let accountant = GaussianCompositionAccountant;
    let mut options = TrainOptions::new(config.seeds.train());
    options.codec = config.codec;
    options.accountant = &accountant;
    options.summation = Some(&mut audited);
    options.tokens = tokens.as_ref();
    options.observer = observer.as_mut().map(|o| o as &mut dyn StepObserver);

    let trained = run_training(&config.train, &train, Some(&test), &partition, options);
    match trained {
        Ok(report) => {
            result.timings = report.timings;
            result.report = Some(report);
        }
        Err(LearnerError::Aborted { round, cause, partial }) => {
            warn!("training aborted at step {round}: {cause}");
            result.outcome = Outcome::Aborted {
                phase: abort_phase(&cause),
                round: Some(round),
                error: cause.to_string(),
            };
            result.timings = partial.timings;
            result.report = Some(*partial);
        }
        Err(e) => return Err(e.into()),
    }
    let deviations = std::mem::take(&mut audited.deviations);
    drop(audited);

    if let Some(obs) = &observer {
        let pc = &config.train.privacy;
        let sigma = result
            .report
            .as_ref()
            .and_then(|r| r.noise_plan.as_ref())
            .map_or(0.0, |p| p.sigma);
        let plan = plan_noise(sigma, clients.len(), pc.colluders, pc.noise_mode)?;
        result.adversary.push(AdversaryReport::RevealNoiseShare {
            parties: revealers.clone(),
            predicted_residual_variance: plan.residual_variance(revealers.len()),
            measured_residual_variance: obs.residual_variance(),
            samples: obs.samples(),
        });
    }
    let substitutes = config.targets(Behavior::SubstituteMessage);
    if !substitutes.is_empty() {
        result.adversary.push(AdversaryReport::SubstituteMessage {
            parties: substitutes,
            offset: substitution_offset(config),
            deviations,
        });
    }

    let transcript = networked.map(TransportAggregator::into_transcript);
    if let Some(t) = &transcript {
        let summary = summarize(t);
        let observers = config.targets(Behavior::ObserveAll);
        if !observers.is_empty() {
            result.adversary.push(AdversaryReport::ObserveAll {
                parties: observers,
                messages_observed: summary.messages,
                uniform_rounds: summary.uniform_rounds,
            });
        }
        result.transcript = Some(summary);
    }
    Ok(ExperimentRun { result, transcript })
}

fn substitution_offset(config: &ExperimentConfig) -> u64 {
    config
        .adversary
        .iter()
        .find(|a| a.behavior == Behavior::SubstituteMessage)
        .and_then(|a| a.offset)
        .unwrap_or(DEFAULT_SUBSTITUTION_OFFSET)
}

/// Runs the experiment and writes its files under `out` (or the configured
/// output directory). Protocol aborts still produce a result file.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult, HarnessError> {
    let run = execute(config)?;
    if let Some(dir) = out.or(config.output.as_deref()) {
        let files = run.result.write(dir, run.transcript.as_ref())?;
        info!("wrote {}", files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    Ok(run.result)
}

/// Messages one party sent or received, for transcript replay checks.
pub fn party_view(transcript: &Transcript, party: u32) -> Vec<TranscriptEntry> {
    transcript.view_of(party).into_iter().cloned().collect()
}
