//! Append-only, hash-chained log of protocol messages.

use serde::{Deserialize, Serialize};

use crate::keystream::digest32;
use crate::timing::PhaseTimings;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: u64,
    pub sender: u32,
    pub receiver: u32,
    pub bytes: usize,
    /// BLAKE2b digest of the message, hex.
    pub message_hash: String,
    /// Digest of the previous entry's chain value and this entry.
    pub chain: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    round_timings: Vec<(u64, PhaseTimings)>,
}

/// A message as observed on the wire, before chaining.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Observed {
    pub round: u64,
    pub sender: u32,
    pub receiver: u32,
    pub bytes: usize,
    pub message_hash: [u8; 32],
}

impl Observed {
    pub fn new(round: u64, sender: u32, receiver: u32, message: &[u8]) -> Self {
        Self {
            round,
            sender,
            receiver,
            bytes: message.len(),
            message_hash: digest32(&[message]),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn chain_value(prev: &str, o: &TranscriptEntry) -> String {
    hex(&digest32(&[
        prev.as_bytes(),
        &o.round.to_le_bytes(),
        &o.sender.to_le_bytes(),
        &o.receiver.to_le_bytes(),
        &(o.bytes as u64).to_le_bytes(),
        o.message_hash.as_bytes(),
    ]))
}

impl Transcript {
    /// Appends one round's messages in a canonical order, so concurrent
    /// delivery does not change the log.
    pub fn append_round(&mut self, mut observed: Vec<Observed>, timings: PhaseTimings) {
        observed.sort();
        for o in observed {
            let mut entry = TranscriptEntry {
                round: o.round,
                sender: o.sender,
                receiver: o.receiver,
                bytes: o.bytes,
                message_hash: hex(&o.message_hash),
                chain: String::new(),
            };
            let prev = self.entries.last().map_or("", |e| e.chain.as_str());
            entry.chain = chain_value(prev, &entry);
            self.entries.push(entry);
        }
        if let Some(round) = self.entries.last().map(|e| e.round) {
            self.round_timings.push((round, timings));
        }
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn round_timings(&self) -> &[(u64, PhaseTimings)] {
        &self.round_timings
    }

    pub fn head(&self) -> Option<&str> {
        self.entries.last().map(|e| e.chain.as_str())
    }

    /// Recomputes the chain; `false` if any entry was altered.
    pub fn verify(&self) -> bool {
        let mut prev = String::new();
        for e in &self.entries {
            if chain_value(&prev, e) != e.chain {
                return false;
            }
            prev = e.chain.clone();
        }
        true
    }

    /// Message count and sorted sizes of one round: the shape an observer sees.
    pub fn round_shape(&self, round: u64) -> (usize, Vec<usize>) {
        let mut sizes: Vec<usize> = self.entries.iter().filter(|e| e.round == round).map(|e| e.bytes).collect();
        sizes.sort_unstable();
        (sizes.len(), sizes)
    }

    /// Messages seen by `party` as sender or receiver.
    pub fn view_of(&self, party: u32) -> Vec<&TranscriptEntry> {
        self.entries
            .iter()
            .filter(|e| e.sender == party || e.receiver == party)
            .collect()
    }
}
