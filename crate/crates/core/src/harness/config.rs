//! Experiment configuration: parties and roles, protocol, data, training,
//! token list, seeds and adversaries.

use std::collections::HashSet;
use std::path::PathBuf;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dpnoise::NoiseMode;
use crate::fixedpoint::FixedPointCodec;
use crate::keystream::Seed;
use crate::learner::{DataConfig, PartitionConfig, Regime, TrainConfig};
use crate::sampling::BatchScheme;
use crate::securesum::ProtocolConfig;

use super::aggregator::NODE_BASE;
use super::transport::TransportKind;
use super::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    HonestTee,
    /// Honest-but-curious: follows the protocol.
    #[default]
    Hbc,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Client,
    ComputeNode,
    Aggregator,
    Master,
}

fn default_capabilities() -> Vec<Capability> {
    vec![Capability::Client]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartySpec {
    pub id: u32,
    #[serde(default)]
    pub role: Role,
    /// Local sample count; when given for every client it fixes the partition.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default = "default_capabilities")]
    pub capabilities: Vec<Capability>,
}

impl PartySpec {
    pub fn has(&self, c: Capability) -> bool {
        self.capabilities.contains(&c)
    }
}

/// Either a full party list or `{ "count": N, "role": ... }` for `N`
/// identical clients with ids `0..N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartiesConfig {
    Uniform {
        count: u32,
        #[serde(default)]
        role: Role,
    },
    List(Vec<PartySpec>),
}

impl PartiesConfig {
    pub fn resolve(&self) -> Vec<PartySpec> {
        match self {
            PartiesConfig::Uniform { count, role } => (0..*count)
                .map(|id| PartySpec {
                    id,
                    role: *role,
                    samples: None,
                    capabilities: default_capabilities(),
                })
                .collect(),
            PartiesConfig::List(list) => list.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenListMode {
    /// Tokens and list order from seeds; no encryption.
    #[default]
    Simulate,
    /// Run the onion-encryption mixnet.
    Mixnet,
    /// Load a list written by `make-token-list`.
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenListConfig {
    #[serde(default)]
    pub mode: TokenListMode,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub master: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { master: 0 }
    }
}

impl SeedConfig {
    pub fn root(&self) -> Seed {
        Seed::from_u64(self.master)
    }

    pub fn data(&self) -> Seed {
        self.root().derive("data", &[])
    }

    pub fn train(&self) -> Seed {
        self.root().derive("train", &[])
    }

    pub fn mask(&self) -> Seed {
        self.root().derive("mask", &[])
    }

    pub fn mixnet(&self) -> Seed {
        self.root().derive("mixnet", &[])
    }

    pub fn tokens(&self) -> Seed {
        self.root().derive("tokens", &[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Publish own noise shares so the others can subtract them.
    RevealNoiseShare,
    /// Drop one entry while mixing the token list.
    DropToken,
    /// Add a fixed offset to every element of uploaded messages.
    SubstituteMessage,
    /// Record every message visible on the network.
    ObserveAll,
}

impl std::str::FromStr for Behavior {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.replace('-', "_").as_str() {
            "reveal_noise_share" => Behavior::RevealNoiseShare,
            "drop_token" => Behavior::DropToken,
            "substitute_message" => Behavior::SubstituteMessage,
            "observe_all" => Behavior::ObserveAll,
            _ => return Err(HarnessError::UnknownBehavior(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub behavior: Behavior,
    pub parties: Vec<u32>,
    /// Substitution offset in fixed-point units.
    #[serde(default)]
    pub offset: Option<u64>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub parties: PartiesConfig,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub codec: FixedPointCodec,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub token_list: TokenListConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub adversary: Vec<AdversarySpec>,
    /// Slack `δ'` of the reported worst-case SWOR sampling fraction.
    #[serde(default)]
    pub amplification_slack: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn parties(&self) -> Vec<PartySpec> {
        self.parties.resolve()
    }

    /// Data-holding parties in roster order.
    pub fn clients(&self) -> Vec<PartySpec> {
        self.parties().into_iter().filter(|p| p.has(Capability::Client)).collect()
    }

    pub fn malicious(&self) -> Vec<u32> {
        self.parties()
            .into_iter()
            .filter(|p| p.role == Role::Malicious)
            .map(|p| p.id)
            .collect()
    }

    pub fn targets(&self, behavior: Behavior) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .adversary
            .iter()
            .filter(|a| a.behavior == behavior)
            .flat_map(|a| a.parties.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Rejects inconsistent configurations before any protocol message.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.codec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let parties = self.parties();
        let mut ids = HashSet::new();
        for p in &parties {
            if !ids.insert(p.id) {
                return bad(format!("duplicate party id {}", p.id));
            }
            if p.id >= NODE_BASE {
                return bad(format!("party id {} is reserved", p.id));
            }
            if p.capabilities.is_empty() {
                return bad(format!("party {} has no capabilities", p.id));
            }
        }
        let clients = self.clients();
        if clients.is_empty() {
            return bad("no client parties".into());
        }
        let masters = parties.iter().filter(|p| p.has(Capability::Master)).count();
        if masters > 1 {
            return bad(format!("exactly one master allowed, found {masters}"));
        }
        let declared_nodes = parties.iter().filter(|p| p.has(Capability::ComputeNode)).count();
        match &self.protocol {
            ProtocolConfig::Dca { nodes, .. } => {
                if *nodes == 0 {
                    return bad("DCA runs need at least one compute node".into());
                }
                if declared_nodes > 0 && declared_nodes != *nodes as usize {
                    return bad(format!(
                        "{declared_nodes} parties declare compute_node but the protocol uses {nodes}"
                    ));
                }
            }
            ProtocolConfig::Pairwise { group_size } => {
                if declared_nodes > 0 {
                    return bad("pairwise runs have no compute nodes".into());
                }
                if matches!(group_size, Some(g) if *g < 2) {
                    return bad("pairwise group size must be at least 2".into());
                }
                let aggregators = parties.iter().filter(|p| p.has(Capability::Aggregator)).count();
                if aggregators > 1 {
                    return bad(format!("pairwise runs use one aggregator, found {aggregators}"));
                }
            }
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        if !(self.amplification_slack >= 0.0 && self.amplification_slack < 1.0) {
            return bad(format!("amplification_slack must lie in [0, 1), got {}", self.amplification_slack));
        }

        self.data.validate()?;
        self.train.validate(clients.len())?;
        if let PartitionConfig::Explicit { ranges } = &self.partition {
            if ranges.len() != clients.len() {
                return bad(format!("{} partition ranges for {} clients", ranges.len(), clients.len()));
            }
            if clients.iter().any(|c| c.samples.is_some()) {
                return bad("give either explicit partition ranges or per-party sample counts".into());
            }
        }
        let with_samples = clients.iter().filter(|c| c.samples.is_some()).count();
        if with_samples != 0 && with_samples != clients.len() {
            return bad("sample counts must be given for all clients or none".into());
        }
        if self.token_list.mode == TokenListMode::File && self.token_list.path.is_none() {
            return bad("token_list.mode = file needs a path".into());
        }

        let malicious: HashSet<u32> = self.malicious().into_iter().collect();
        for a in &self.adversary {
            if a.parties.is_empty() {
                return bad(format!("{:?} names no parties", a.behavior));
            }
            for p in &a.parties {
                if !ids.contains(p) {
                    return bad(format!("{:?} targets unknown party {p}", a.behavior));
                }
                if !malicious.contains(p) {
                    return bad(format!("{:?} targets party {p}, which is not flagged malicious", a.behavior));
                }
            }
            match a.behavior {
                Behavior::RevealNoiseShare if self.train.regime != Regime::DpSmc => {
                    return bad("reveal_noise_share needs the dp_smc regime".into());
                }
                Behavior::SubstituteMessage | Behavior::ObserveAll if self.train.regime != Regime::DpSmc => {
                    return bad(format!("{:?} needs the dp_smc regime", a.behavior));
                }
                Behavior::SubstituteMessage | Behavior::ObserveAll if self.transport == TransportKind::InProcess => {
                    return bad(format!("{:?} acts on messages and needs the memory or tcp transport", a.behavior));
                }
                Behavior::DropToken if self.token_list.mode != TokenListMode::Mixnet => {
                    return bad("drop_token needs token_list.mode = mixnet".into());
                }
                Behavior::DropToken if !matches!(self.train.batch, BatchScheme::Swor { .. }) => {
                    return bad("drop_token needs SWOR batches".into());
                }
                _ => {}
            }
        }

        let non_tee = clients.iter().filter(|c| c.role != Role::HonestTee).count();
        if self.train.regime == Regime::DpSmc {
            let pc = &self.train.privacy;
            if pc.noise_mode == NoiseMode::Tee && non_tee > 0 {
                warn!("tee noise mode with {non_tee} clients outside trusted execution");
            }
            if pc.noise_mode == NoiseMode::CollusionRobust && malicious.len() > pc.colluders {
                warn!(
                    "{} malicious parties exceed the {} colluders the noise plan tolerates",
                    malicious.len(),
                    pc.colluders
                );
            }
        }
        Ok(())
    }
}

/// Wires `behavior` into `parties`, which must be flagged malicious.
pub fn inject_adversary(
    config: &ExperimentConfig,
    behavior: &str,
    parties: &[u32],
) -> Result<ExperimentConfig, HarnessError> {
    let behavior: Behavior = behavior.parse()?;
    let malicious: HashSet<u32> = config.malicious().into_iter().collect();
    if let Some(p) = parties.iter().find(|p| !malicious.contains(p)) {
        return Err(HarnessError::Config(format!("party {p} is not flagged malicious")));
    }
    let mut out = config.clone();
    out.adversary.push(AdversarySpec {
        behavior,
        parties: parties.to_vec(),
        offset: None,
    });
    Ok(out)
}
