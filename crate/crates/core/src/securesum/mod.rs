//! Additively homomorphic secure summation.
//!
//! Two protocols share one contract: every client contributes a
//! [`FixedVector`] and the output is their exact sum modulo `R`.
//!
//! * [`pairwise`]: cancelling pairwise masks, for a few fat clients.
//! * [`dca`]: additive secret sharing over `M` compute nodes, for many thin
//!   clients.
//!
//! Neither protocol recovers from a missing participant; the round aborts
//! with [`SecureSumError::IncompleteRound`].

pub mod dca;
pub mod pairwise;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{FixedPointCodec, FixedPointError, FixedVector};
use crate::keystream::Seed;
use crate::timing::{timed, PhaseTimings};

pub use dca::{dca_finalize, dca_make_shares, dca_node_aggregate, AggregateReport, NodeAssignment, ShareSet};
pub use pairwise::{pairwise_aggregate, pairwise_encrypt, pairwise_groups, PairwiseKeyring};
pub use wire::{ProtocolId, WireMessage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SecureSumError {
    #[error("party {party} holds no pairwise seed for peer {peer}")]
    MissingPeerSeed { party: u32, peer: u32 },
    #[error("incomplete round in {phase}: expected {expected} contributions, received {received}")]
    IncompleteRound {
        phase: &'static str,
        expected: usize,
        received: usize,
    },
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error("invalid protocol configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed wire message: {0}")]
    Wire(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

/// Which summation protocol a run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolConfig {
    Pairwise {
        /// Clients are masked within consecutive groups of this size
        /// (whole roster when absent).
        #[serde(default)]
        group_size: Option<usize>,
    },
    Dca {
        nodes: u32,
        /// Optional client → node subset map; clients not listed use all nodes.
        #[serde(default)]
        subsets: BTreeMap<u32, Vec<u32>>,
    },
}

impl ProtocolConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pairwise { .. } => "pairwise",
            Self::Dca { .. } => "dca",
        }
    }
}

/// Result of one summation round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub sum: FixedVector,
    pub timings: PhaseTimings,
    /// Total bytes uploaded by all clients in this round.
    pub uploaded_bytes: usize,
}

/// A secure summation back end. `inputs[i]` belongs to the `i`-th client of
/// the roster the implementation was built for.
pub trait SecureSummation: Send {
    fn sum_round(&mut self, round: u64, inputs: &[FixedVector]) -> Result<RoundOutcome, SecureSumError>;
}

/// Per-client protocol state for either protocol.
#[derive(Debug, Clone)]
pub enum ClientProtocol {
    Pairwise {
        keyring: PairwiseKeyring,
        group: Vec<u32>,
    },
    Dca {
        nodes: Vec<u32>,
        share_seed: Seed,
    },
}

impl ClientProtocol {
    /// Builds the state for every client in `clients`.
    pub fn for_roster(
        protocol: &ProtocolConfig,
        clients: &[u32],
        setup: &Seed,
    ) -> Result<(Vec<ClientProtocol>, Option<NodeAssignment>), SecureSumError> {
        match protocol {
            ProtocolConfig::Pairwise { group_size } => {
                if matches!(group_size, Some(g) if *g < 2) {
                    return Err(SecureSumError::InvalidConfig(
                        "pairwise group size must be at least 2".into(),
                    ));
                }
                let groups = pairwise_groups(clients, *group_size);
                let states = clients
                    .iter()
                    .map(|&c| {
                        let group = groups
                            .iter()
                            .find(|g| g.contains(&c))
                            .expect("every client is in a group")
                            .clone();
                        ClientProtocol::Pairwise {
                            keyring: PairwiseKeyring::from_setup_seed(setup, c, group.clone()),
                            group,
                        }
                    })
                    .collect();
                Ok((states, None))
            }
            ProtocolConfig::Dca { nodes, subsets } => {
                if *nodes == 0 {
                    return Err(SecureSumError::InvalidConfig(
                        "DCA needs at least one compute node".into(),
                    ));
                }
                let assignment = NodeAssignment::with_subsets(*nodes, clients.to_vec(), subsets.clone())?;
                let states = clients
                    .iter()
                    .map(|&c| ClientProtocol::Dca {
                        nodes: assignment.nodes_for(c),
                        share_seed: setup.derive("dca-shares", &[c as u64]),
                    })
                    .collect();
                Ok((states, Some(assignment)))
            }
        }
    }

    /// The client's outgoing messages for `round`: `(node, payload)` pairs.
    /// For the pairwise protocol there is one message, addressed to node 0.
    pub fn client_messages(
        &self,
        round: u64,
        y: &FixedVector,
    ) -> Result<Vec<(u32, FixedVector)>, SecureSumError> {
        match self {
            ClientProtocol::Pairwise { keyring, group } => {
                Ok(vec![(0, pairwise_encrypt(y, keyring, group, round)?)])
            }
            ClientProtocol::Dca { nodes, share_seed } => {
                let mut rng = share_seed.derive("round", &[round]).rng();
                let shares = dca_make_shares(y, nodes.len(), &mut rng);
                Ok(nodes.iter().copied().zip(shares.shares).collect())
            }
        }
    }
}

/// Runs the client, node and aggregator steps by direct function calls.
/// Protocol arithmetic is identical to the networked harness.
pub struct InProcessSummation {
    codec: FixedPointCodec,
    clients: Vec<ClientProtocol>,
    assignment: Option<NodeAssignment>,
}

impl InProcessSummation {
    pub fn new(
        protocol: &ProtocolConfig,
        clients: &[u32],
        setup: &Seed,
        codec: FixedPointCodec,
    ) -> Result<Self, SecureSumError> {
        let (clients, assignment) = ClientProtocol::for_roster(protocol, clients, setup)?;
        Ok(Self {
            codec,
            clients,
            assignment,
        })
    }
}

impl SecureSummation for InProcessSummation {
    fn sum_round(&mut self, round: u64, inputs: &[FixedVector]) -> Result<RoundOutcome, SecureSumError> {
        if inputs.len() != self.clients.len() {
            return Err(SecureSumError::IncompleteRound {
                phase: "client upload",
                expected: self.clients.len(),
                received: inputs.len(),
            });
        }
        let (messages, mask_secs) = timed(|| {
            self.clients
                .iter()
                .zip(inputs)
                .map(|(client, y)| client.client_messages(round, y))
                .collect::<Result<Vec<_>, _>>()
        });
        let messages = messages?;
        let uploaded_bytes = messages
            .iter()
            .flatten()
            .map(|(_, m)| WireMessage::encoded_len(self.codec, m.len()))
            .sum();

        let (sum, aggregate_secs) = timed(|| -> Result<FixedVector, SecureSumError> {
            match &self.assignment {
                None => {
                    let flat: Vec<FixedVector> = messages.into_iter().flatten().map(|(_, m)| m).collect();
                    pairwise_aggregate(&flat, self.clients.len())
                }
                Some(assignment) => {
                    let mut per_node: BTreeMap<u32, Vec<FixedVector>> = BTreeMap::new();
                    for (node, msg) in messages.into_iter().flatten() {
                        per_node.entry(node).or_default().push(msg);
                    }
                    let reports = per_node
                        .into_iter()
                        .map(|(node, msgs)| dca_node_aggregate(node, &msgs, assignment.clients_of(node)))
                        .collect::<Result<Vec<_>, _>>()?;
                    dca_finalize(&reports, assignment)
                }
            }
        });
        Ok(RoundOutcome {
            sum: sum?,
            timings: PhaseTimings {
                mask: mask_secs,
                aggregate: aggregate_secs,
                ..PhaseTimings::default()
            },
            uploaded_bytes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode_all(codec: FixedPointCodec, xs: &[f64]) -> Vec<FixedVector> {
        xs.iter().map(|&x| codec.encode(&[x, -x]).unwrap()).collect()
    }

    #[test]
    fn in_process_protocols_sum_exactly() {
        let codec = FixedPointCodec::default();
        let clients: Vec<u32> = (0..6).collect();
        let inputs = encode_all(codec, &[1.0, 2.5, -3.0, 0.25, 7.0, -1.5]);
        let expected = FixedVector::sum_mod(inputs.iter()).unwrap().unwrap();
        for protocol in [
            ProtocolConfig::Pairwise { group_size: None },
            ProtocolConfig::Pairwise { group_size: Some(4) },
            ProtocolConfig::Dca {
                nodes: 3,
                subsets: BTreeMap::new(),
            },
        ] {
            let mut summation =
                InProcessSummation::new(&protocol, &clients, &Seed::from_u64(5), codec).unwrap();
            for round in 0..3 {
                let out = summation.sum_round(round, &inputs).unwrap();
                assert_eq!(out.sum, expected, "{protocol:?}");
            }
        }
    }

    #[test]
    fn missing_input_aborts() {
        let codec = FixedPointCodec::default();
        let mut summation = InProcessSummation::new(
            &ProtocolConfig::Dca {
                nodes: 2,
                subsets: BTreeMap::new(),
            },
            &[0, 1, 2],
            &Seed::from_u64(1),
            codec,
        )
        .unwrap();
        let inputs = encode_all(codec, &[1.0, 2.0]);
        assert!(matches!(
            summation.sum_round(0, &inputs),
            Err(SecureSumError::IncompleteRound { .. })
        ));
    }

    #[test]
    fn protocol_config_json_shape() {
        let json = r#"{"kind":"dca","nodes":4}"#;
        let parsed: ProtocolConfig = serde_json::from_str(json).unwrap();
        assert_eq!(
            parsed,
            ProtocolConfig::Dca {
                nodes: 4,
                subsets: BTreeMap::new()
            }
        );
        let pw: ProtocolConfig = serde_json::from_str(r#"{"kind":"pairwise"}"#).unwrap();
        assert_eq!(pw.name(), "pairwise");
    }
}
