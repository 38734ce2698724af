//! Malicious behaviors. Each acts only through a hook on the message
//! interface; the honest protocol code never branches on roles.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::fixedpoint::FixedVector;
use crate::learner::{StepObserver, StepView};
use crate::mixnet::{MixTamper, TokenList};
use crate::securesum::{RoundOutcome, SecureSumError, SecureSummation, WireMessage};

use super::aggregator::MessageTamper;

/// Colluders publish their noise shares; the others can subtract them from
/// the released sum. Tracks the variance of the noise that is left.
pub struct RevealNoiseShare {
    revealed: HashSet<usize>,
    sum_sq: f64,
    count: u64,
}

impl RevealNoiseShare {
    /// `revealed` are client positions in roster order.
    pub fn new(revealed: impl IntoIterator<Item = usize>) -> Self {
        Self {
            revealed: revealed.into_iter().collect(),
            sum_sq: 0.0,
            count: 0,
        }
    }

    /// Per-coordinate variance of the unrevealed noise, over all steps seen.
    pub fn residual_variance(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_sq / self.count as f64)
    }

    pub fn samples(&self) -> u64 {
        self.count
    }
}

impl StepObserver for RevealNoiseShare {
    fn on_step(&mut self, view: &StepView<'_>) {
        let Some(first) = view.noise_shares.first() else {
            return;
        };
        for j in 0..first.len() {
            let residual: f64 = view
                .noise_shares
                .iter()
                .enumerate()
                .filter(|(i, _)| !self.revealed.contains(i))
                .map(|(_, s)| s[j])
                .sum();
            self.sum_sq += residual * residual;
            self.count += 1;
        }
    }
}

/// Adds `offset` (fixed-point units, mod `R`) to every element of each
/// message the named senders upload.
pub struct SubstituteMessage {
    senders: HashSet<u32>,
    offset: u64,
}

impl SubstituteMessage {
    pub fn new(senders: impl IntoIterator<Item = u32>, offset: u64) -> Self {
        Self {
            senders: senders.into_iter().collect(),
            offset,
        }
    }
}

impl MessageTamper for SubstituteMessage {
    fn outgoing(&self, _round: u64, msg: &mut WireMessage) -> bool {
        if self.senders.contains(&msg.sender) {
            let codec = msg.payload.codec();
            let shifted = msg.payload.values().iter().map(|v| v.wrapping_add(self.offset));
            msg.payload = FixedVector::from_words_reduced(codec, shifted);
        }
        true
    }
}

/// Removes the last entry of the list published by the mixer at `position`.
pub struct DropToken {
    pub position: usize,
}

impl MixTamper for DropToken {
    fn tamper(&self, position: usize, list: &mut TokenList) {
        if position == self.position {
            list.entries.pop();
        }
    }
}

/// Per-round deviation of a summation back end from the plain modular sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumDeviation {
    pub round: u64,
    /// `output - plain sum (mod R)` when every element deviates equally.
    pub uniform_offset: Option<u64>,
    pub elements_changed: usize,
}

/// Wraps a back end and compares every output with the plain sum of the
/// inputs. The orchestrator holds all inputs, so this is an oracle, not a
/// protocol party.
pub struct AuditedSummation<'a> {
    inner: &'a mut dyn SecureSummation,
    pub deviations: Vec<SumDeviation>,
}

impl<'a> AuditedSummation<'a> {
    pub fn new(inner: &'a mut dyn SecureSummation) -> Self {
        Self {
            inner,
            deviations: Vec::new(),
        }
    }
}

impl SecureSummation for AuditedSummation<'_> {
    fn sum_round(&mut self, round: u64, inputs: &[FixedVector]) -> Result<RoundOutcome, SecureSumError> {
        let outcome = self.inner.sum_round(round, inputs)?;
        if let Some(plain) = FixedVector::sum_mod(inputs.iter())? {
            let mut diff = outcome.sum.clone();
            diff.sub_assign_mod(&plain)?;
            let changed = diff.values().iter().filter(|&&v| v != 0).count();
            let first_diff = diff.values().first().copied().unwrap_or(0);
            let uniform = diff.values().iter().all(|&v| v == first_diff);
            self.deviations.push(SumDeviation {
                round,
                uniform_offset: uniform.then_some(first_diff),
                elements_changed: changed,
            });
        }
        Ok(outcome)
    }
}
