//! Secure summation over a message-passing network, one thread per party
//! per round.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;

use crate::fixedpoint::{FixedPointCodec, FixedVector};
use crate::keystream::Seed;
use crate::securesum::{
    dca_finalize, dca_node_aggregate, pairwise_aggregate, AggregateReport, ClientProtocol, NodeAssignment,
    ProtocolConfig, ProtocolId, RoundOutcome, SecureSumError, SecureSummation, WireMessage,
};
use crate::timing::{timed, PhaseTimings};

use super::transcript::{Observed, Transcript};
use super::transport::{Endpoint, Network, TransportError};

/// Endpoint id of compute node `m` is `NODE_BASE + m`.
pub const NODE_BASE: u32 = 1 << 30;
/// Endpoint id of the pairwise aggregator or DCA master.
pub const AGGREGATOR_ID: u32 = u32::MAX;

/// Adversarial hook on outgoing client messages.
pub trait MessageTamper: Send + Sync {
    /// May rewrite `msg`; returning `false` drops it.
    fn outgoing(&self, round: u64, msg: &mut WireMessage) -> bool;
}

pub struct TransportAggregator {
    codec: FixedPointCodec,
    clients: Vec<ClientProtocol>,
    client_ids: Vec<u32>,
    assignment: Option<NodeAssignment>,
    client_endpoints: Vec<Box<dyn Endpoint>>,
    node_endpoints: Vec<(u32, Box<dyn Endpoint>)>,
    aggregator: Box<dyn Endpoint>,
    timeout: Duration,
    tamper: Option<Arc<dyn MessageTamper>>,
    transcript: Transcript,
}

fn transport_err(e: TransportError) -> SecureSumError {
    SecureSumError::Transport(e.to_string())
}

/// Receives `expected` messages of `protocol` for `round`, or fails at the deadline.
fn collect(
    endpoint: &mut dyn Endpoint,
    codec: FixedPointCodec,
    round: u64,
    protocol: ProtocolId,
    expected: usize,
    timeout: Duration,
    phase: &'static str,
) -> Result<(Vec<WireMessage>, Vec<Observed>), SecureSumError> {
    let deadline = Instant::now() + timeout;
    let mut messages = Vec::with_capacity(expected);
    let mut seen = Vec::with_capacity(expected);
    while messages.len() < expected {
        let remaining = deadline.saturating_duration_since(Instant::now());
        let (from, bytes) = match endpoint.recv_timeout(remaining) {
            Ok(m) => m,
            Err(TransportError::Timeout) => {
                return Err(SecureSumError::IncompleteRound {
                    phase,
                    expected,
                    received: messages.len(),
                })
            }
            Err(e) => return Err(transport_err(e)),
        };
        let msg = WireMessage::decode(codec, &bytes)?;
        if msg.round != round || msg.protocol != protocol {
            warn!("discarding stale {:?} message from {from} for round {}", msg.protocol, msg.round);
            continue;
        }
        seen.push(Observed::new(round, from, endpoint.id(), &bytes));
        messages.push(msg);
    }
    Ok((messages, seen))
}

impl TransportAggregator {
    pub fn new(
        protocol: &ProtocolConfig,
        client_ids: &[u32],
        setup: &Seed,
        codec: FixedPointCodec,
        network: &dyn Network,
        timeout: Duration,
    ) -> Result<Self, SecureSumError> {
        if client_ids.iter().any(|&c| c >= NODE_BASE) {
            return Err(SecureSumError::InvalidConfig(format!("client ids must be below {NODE_BASE}")));
        }
        let (clients, assignment) = ClientProtocol::for_roster(protocol, client_ids, setup)?;
        let nodes: Vec<u32> = assignment.as_ref().map_or(Vec::new(), |a| a.active_nodes());
        let mut ids: Vec<u32> = client_ids.to_vec();
        ids.extend(nodes.iter().map(|m| NODE_BASE + m));
        ids.push(AGGREGATOR_ID);
        let mut endpoints = network.connect(&ids).map_err(transport_err)?;
        let aggregator = endpoints.pop().expect("aggregator endpoint");
        let node_endpoints: Vec<(u32, Box<dyn Endpoint>)> =
            nodes.iter().copied().zip(endpoints.drain(client_ids.len()..)).collect();
        Ok(Self {
            codec,
            clients,
            client_ids: client_ids.to_vec(),
            assignment,
            client_endpoints: endpoints,
            node_endpoints,
            aggregator,
            timeout,
            tamper: None,
            transcript: Transcript::default(),
        })
    }

    pub fn with_tamper(mut self, tamper: Arc<dyn MessageTamper>) -> Self {
        self.tamper = Some(tamper);
        self
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

struct ClientResult {
    mask_secs: f64,
    uploaded: usize,
}

impl SecureSummation for TransportAggregator {
    fn sum_round(&mut self, round: u64, inputs: &[FixedVector]) -> Result<RoundOutcome, SecureSumError> {
        if inputs.len() != self.clients.len() {
            return Err(SecureSumError::IncompleteRound {
                phase: "client upload",
                expected: self.clients.len(),
                received: inputs.len(),
            });
        }
        let codec = self.codec;
        let timeout = self.timeout;
        let tamper = self.tamper.clone();
        let assignment = self.assignment.clone();
        let n_clients = self.clients.len();
        let started = Instant::now();

        let (client_results, node_results, final_result) = thread::scope(|scope| {
            let client_handles: Vec<_> = self
                .client_endpoints
                .iter_mut()
                .zip(&self.clients)
                .zip(&self.client_ids)
                .zip(inputs)
                .map(|(((endpoint, protocol), &id), y)| {
                    let tamper = tamper.clone();
                    scope.spawn(move || -> Result<ClientResult, SecureSumError> {
                        let (messages, mask_secs) = timed(|| protocol.client_messages(round, y));
                        let mut uploaded = 0;
                        for (node, payload) in messages? {
                            let (kind, to) = match protocol {
                                ClientProtocol::Pairwise { .. } => (ProtocolId::Pairwise, AGGREGATOR_ID),
                                ClientProtocol::Dca { .. } => (ProtocolId::DcaShare, NODE_BASE + node),
                            };
                            let mut msg = WireMessage {
                                protocol: kind,
                                round,
                                sender: id,
                                node,
                                payload,
                            };
                            if let Some(t) = &tamper {
                                if !t.outgoing(round, &mut msg) {
                                    continue;
                                }
                            }
                            let bytes = msg.encode();
                            uploaded += bytes.len();
                            endpoint.send(to, bytes).map_err(transport_err)?;
                        }
                        Ok(ClientResult { mask_secs, uploaded })
                    })
                })
                .collect();

            let node_handles: Vec<_> = self
                .node_endpoints
                .iter_mut()
                .map(|(node, endpoint)| {
                    let node = *node;
                    let expected = assignment.as_ref().map_or(0, |a| a.clients_of(node));
                    scope.spawn(move || -> Result<(Vec<Observed>, f64), SecureSumError> {
                        let (messages, seen) = collect(
                            endpoint.as_mut(),
                            codec,
                            round,
                            ProtocolId::DcaShare,
                            expected,
                            timeout,
                            "compute node aggregation",
                        )?;
                        let payloads: Vec<FixedVector> = messages.into_iter().map(|m| m.payload).collect();
                        let (report, secs) = timed(|| dca_node_aggregate(node, &payloads, expected));
                        let report = report?;
                        let msg = WireMessage {
                            protocol: ProtocolId::DcaReport,
                            round,
                            sender: NODE_BASE + node,
                            node,
                            payload: report.partial_sum,
                        };
                        endpoint.send(AGGREGATOR_ID, msg.encode()).map_err(transport_err)?;
                        Ok((seen, secs))
                    })
                })
                .collect();

            let aggregator = self.aggregator.as_mut();
            let final_handle = scope.spawn(move || -> Result<(FixedVector, Vec<Observed>, f64), SecureSumError> {
                match &assignment {
                    None => {
                        let (messages, seen) = collect(
                            aggregator,
                            codec,
                            round,
                            ProtocolId::Pairwise,
                            n_clients,
                            timeout,
                            "pairwise aggregation",
                        )?;
                        let payloads: Vec<FixedVector> = messages.into_iter().map(|m| m.payload).collect();
                        let (sum, secs) = timed(|| pairwise_aggregate(&payloads, n_clients));
                        Ok((sum?, seen, secs))
                    }
                    Some(a) => {
                        let expected = a.active_nodes().len();
                        // nodes wait up to one timeout; allow the same again for reports
                        let (messages, seen) = collect(
                            aggregator,
                            codec,
                            round,
                            ProtocolId::DcaReport,
                            expected,
                            timeout * 2,
                            "final aggregation",
                        )?;
                        let mut by_node: BTreeMap<u32, FixedVector> = BTreeMap::new();
                        for m in messages {
                            by_node.insert(m.node, m.payload);
                        }
                        let reports: Vec<AggregateReport> = by_node
                            .into_iter()
                            .map(|(node_id, partial_sum)| AggregateReport {
                                node_id,
                                partial_sum,
                                contributor_count: a.clients_of(node_id),
                            })
                            .collect();
                        let (sum, secs) = timed(|| dca_finalize(&reports, a));
                        Ok((sum?, seen, secs))
                    }
                }
            });

            let clients: Vec<_> = client_handles.into_iter().map(|h| h.join().expect("client thread")).collect();
            let nodes: Vec<_> = node_handles.into_iter().map(|h| h.join().expect("node thread")).collect();
            let last = final_handle.join().expect("aggregator thread");
            (clients, nodes, last)
        });
        let wall = started.elapsed().as_secs_f64();

        let clients = client_results.into_iter().collect::<Result<Vec<_>, _>>()?;
        // a node failure explains a missing final report better than the master's timeout
        let nodes = node_results.into_iter().collect::<Result<Vec<_>, _>>()?;
        let (sum, final_seen, final_secs) = final_result?;

        let mut observed: Vec<Observed> = final_seen;
        let mut node_secs: f64 = 0.0;
        for (seen, secs) in nodes {
            observed.extend(seen);
            node_secs = node_secs.max(secs);
        }
        let mask: f64 = clients.iter().map(|c| c.mask_secs).sum();
        let max_mask = clients.iter().map(|c| c.mask_secs).fold(0.0, f64::max);
        let aggregate = final_secs + node_secs;
        let timings = PhaseTimings {
            gradient: 0.0,
            mask,
            transport: (wall - max_mask - aggregate).max(0.0),
            aggregate,
        };
        self.transcript.append_round(observed, timings);
        Ok(RoundOutcome {
            sum,
            timings,
            uploaded_bytes: clients.iter().map(|c| c.uploaded).sum(),
        })
    }
}
