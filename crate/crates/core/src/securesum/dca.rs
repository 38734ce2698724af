//! Distributed Compute Algorithm: additive secret sharing across `M`
//! compute nodes for many thin clients.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::fixedpoint::FixedVector;

use super::SecureSumError;

/// `M` shares of one client's payload. Share 0 carries the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareSet {
    pub shares: Vec<FixedVector>,
}

impl ShareSet {
    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }

    /// Recombines all shares.
    pub fn reconstruct(&self) -> Result<FixedVector, SecureSumError> {
        FixedVector::sum_mod(self.shares.iter())?.ok_or(SecureSumError::IncompleteRound {
            phase: "share reconstruction",
            expected: 1,
            received: 0,
        })
    }
}

/// `q_l` from node `l` together with how many clients it summed.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub node_id: u32,
    pub partial_sum: FixedVector,
    pub contributor_count: usize,
}

/// Splits `y` into `m` additive shares: `m - 1` uniform masks `u_l` on
/// `[0, R)`, a last mask `-Σ u_l`, and the payload added to the first.
pub fn dca_make_shares<R: RngCore + ?Sized>(y: &FixedVector, m: usize, rng: &mut R) -> ShareSet {
    assert!(m >= 1, "at least one compute node is required");
    if m == 1 {
        log::warn!("DCA with a single compute node offers no privacy against that node");
    }
    let codec = y.codec();
    let mut masks: Vec<FixedVector> = (0..m - 1)
        .map(|_| FixedVector::from_words_reduced(codec, (0..y.len()).map(|_| rng.next_u64())))
        .collect();
    let last = match FixedVector::sum_mod(masks.iter()).expect("same codec and length") {
        Some(sum) => sum.neg_mod(),
        None => FixedVector::zeros(codec, y.len()),
    };
    masks.push(last);
    masks[0]
        .add_assign_mod(y)
        .expect("masks share the payload's codec and length");
    ShareSet { shares: masks }
}

/// `q_l = Σ_i m_il mod R` over the `expected` clients routed to this node.
pub fn dca_node_aggregate(
    node_id: u32,
    messages: &[FixedVector],
    expected: usize,
) -> Result<AggregateReport, SecureSumError> {
    if messages.is_empty() || messages.len() != expected {
        return Err(SecureSumError::IncompleteRound {
            phase: "compute node aggregation",
            expected,
            received: messages.len(),
        });
    }
    let partial_sum = FixedVector::sum_mod(messages.iter())?.expect("non-empty");
    Ok(AggregateReport {
        node_id,
        partial_sum,
        contributor_count: messages.len(),
    })
}

/// `Σ_l q_l mod R`. Every expected node must report, each with its full
/// client count.
pub fn dca_finalize(
    reports: &[AggregateReport],
    assignment: &NodeAssignment,
) -> Result<FixedVector, SecureSumError> {
    let expected_nodes = assignment.active_nodes();
    if reports.len() != expected_nodes.len() || reports.is_empty() {
        return Err(SecureSumError::IncompleteRound {
            phase: "final aggregation",
            expected: expected_nodes.len(),
            received: reports.len(),
        });
    }
    for report in reports {
        let expected = assignment.clients_of(report.node_id);
        if report.contributor_count != expected {
            return Err(SecureSumError::IncompleteRound {
                phase: "final aggregation",
                expected,
                received: report.contributor_count,
            });
        }
    }
    Ok(FixedVector::sum_mod(reports.iter().map(|r| &r.partial_sum))?.expect("non-empty"))
}

/// Which compute nodes each client sends shares to. By default every client
/// uses all `M` nodes; with an explicit map, privacy requires one
/// non-colluding node inside every client's subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAssignment {
    nodes: u32,
    clients: Vec<u32>,
    #[serde(default)]
    subsets: BTreeMap<u32, Vec<u32>>,
}

impl NodeAssignment {
    pub fn all_nodes(nodes: u32, clients: Vec<u32>) -> Self {
        Self {
            nodes,
            clients,
            subsets: BTreeMap::new(),
        }
    }

    pub fn with_subsets(
        nodes: u32,
        clients: Vec<u32>,
        subsets: BTreeMap<u32, Vec<u32>>,
    ) -> Result<Self, SecureSumError> {
        for (client, subset) in &subsets {
            if !clients.contains(client) {
                return Err(SecureSumError::InvalidConfig(format!(
                    "node subset given for unknown client {client}"
                )));
            }
            if subset.is_empty() || subset.iter().any(|&n| n >= nodes) {
                return Err(SecureSumError::InvalidConfig(format!(
                    "client {client} has an empty or out-of-range node subset"
                )));
            }
            let mut sorted = subset.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != subset.len() {
                return Err(SecureSumError::InvalidConfig(format!(
                    "client {client} lists a node twice"
                )));
            }
        }
        Ok(Self {
            nodes,
            clients,
            subsets,
        })
    }

    pub fn node_count(&self) -> u32 {
        self.nodes
    }

    pub fn clients(&self) -> &[u32] {
        &self.clients
    }

    /// Nodes (0-based) that receive shares from `client`.
    pub fn nodes_for(&self, client: u32) -> Vec<u32> {
        self.subsets
            .get(&client)
            .cloned()
            .unwrap_or_else(|| (0..self.nodes).collect())
    }

    pub fn clients_of(&self, node: u32) -> usize {
        self.clients
            .iter()
            .filter(|&&c| self.nodes_for(c).contains(&node))
            .count()
    }

    /// Nodes that receive at least one share.
    pub fn active_nodes(&self) -> Vec<u32> {
        (0..self.nodes).filter(|&n| self.clients_of(n) > 0).collect()
    }
}
