//! Seeded pseudorandom streams shared by all protocols.
//!
//! Everything that several parties must reproduce bit-for-bit (pairwise
//! masks, the SWOR shuffle, projection matrices) is derived from a 32-byte
//! [`Seed`] through one of two framings:
//!
//! * [`hash_u64`]: `BLAKE2b-64(seed ‖ counter_le64 ‖ index_le64)`, read as a
//!   little-endian `u64`. One digest per output word.
//! * [`Seed::rng`]: a ChaCha20 stream keyed by the seed, for bulk output
//!   (Gaussian matrices, secret shares, noise).
//!
//! Named sub-streams are obtained with [`Seed::derive`], which hashes the
//! parent seed together with a label and a list of integer ids.

use std::fmt;

use blake2::digest::{Update, VariableOutput};
use blake2::{Blake2b512, Blake2bVar, Digest};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const SEED_LEN: usize = 32;

/// 32 bytes of key material.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Seed(pub [u8; SEED_LEN]);

impl Seed {
    /// Expands a small integer (as found in config files) into a seed.
    pub fn from_u64(value: u64) -> Self {
        Self::labelled(b"dpsmc/seed/u64", &[value])
    }

    fn labelled(label: &[u8], ids: &[u64]) -> Self {
        let mut hasher = Blake2b512::new();
        Digest::update(&mut hasher, (label.len() as u64).to_le_bytes());
        Digest::update(&mut hasher, label);
        for id in ids {
            Digest::update(&mut hasher, id.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = [0u8; SEED_LEN];
        out.copy_from_slice(&digest[..SEED_LEN]);
        Seed(out)
    }

    /// Derives an independent child seed for the stream named `label`
    /// indexed by `ids` (party id, round, ...).
    pub fn derive(&self, label: &str, ids: &[u64]) -> Self {
        let mut hasher = Blake2b512::new();
        Digest::update(&mut hasher, self.0);
        Digest::update(&mut hasher, (label.len() as u64).to_le_bytes());
        Digest::update(&mut hasher, label.as_bytes());
        for id in ids {
            Digest::update(&mut hasher, id.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = [0u8; SEED_LEN];
        out.copy_from_slice(&digest[..SEED_LEN]);
        Seed(out)
    }

    /// ChaCha20 generator keyed by this seed.
    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.0)
    }

    pub fn xor(&self, other: &Seed) -> Seed {
        let mut out = self.0;
        for (a, b) in out.iter_mut().zip(other.0.iter()) {
            *a ^= b;
        }
        Seed(out)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({}..)", &self.to_hex()[..8])
    }
}

/// `BLAKE2b` with an 8-byte digest over `seed ‖ counter ‖ index`, both
/// integers little-endian `u64`.
pub fn hash_u64(seed: &Seed, counter: u64, index: u64) -> u64 {
    let mut hasher = Blake2bVar::new(8).expect("8 is a valid BLAKE2b output size");
    hasher.update(&seed.0);
    hasher.update(&counter.to_le_bytes());
    hasher.update(&index.to_le_bytes());
    let mut out = [0u8; 8];
    hasher
        .finalize_variable(&mut out)
        .expect("output buffer matches digest size");
    u64::from_le_bytes(out)
}

/// 32-byte BLAKE2b digest of the concatenation of `parts`.
pub fn digest32(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Blake2bVar::new(32).expect("32 is a valid BLAKE2b output size");
    for part in parts {
        hasher.update(part);
    }
    let mut out = [0u8; 32];
    hasher
        .finalize_variable(&mut out)
        .expect("output buffer matches digest size");
    out
}

/// Sequential reader over the [`hash_u64`] framing with a fixed counter.
#[derive(Debug, Clone)]
pub struct HashStream {
    seed: Seed,
    counter: u64,
    index: u64,
}

impl HashStream {
    pub fn new(seed: Seed, counter: u64) -> Self {
        Self {
            seed,
            counter,
            index: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = hash_u64(&self.seed, self.counter, self.index);
        self.index += 1;
        out
    }

    /// Uniform integer in `[0, bound)` by rejection, so no modulo bias.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let limit = (1u128 << 64) / bound as u128 * bound as u128;
        loop {
            let x = self.next_u64();
            if (x as u128) < limit {
                return x % bound;
            }
        }
    }
}
