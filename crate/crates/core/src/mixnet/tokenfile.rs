//! Persisted token list.
//!
//! ```text
//! magic "DPTL" | version u8 = 1 | n u64 | N u32 | roster hash [32] | n × 16-byte tokens
//! ```
//! Integers little-endian. The roster hash binds the list to the exact
//! set of parties (ids, sample counts, public keys) that created it.

use std::fs;
use std::path::Path;

use crate::keystream::digest32;

use super::{MixnetError, Token, TOKEN_BYTES};

const MAGIC: &[u8; 4] = b"DPTL";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8 + 4 + 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub parties: u32,
    pub roster_hash: [u8; 32],
    pub tokens: Vec<Token>,
}

/// Hash of `(party id, sample count, public key)` triples in roster order.
pub fn roster_hash<'a>(roster: impl IntoIterator<Item = (u32, usize, &'a [u8])>) -> [u8; 32] {
    let mut buf = Vec::new();
    for (id, count, key) in roster {
        buf.extend_from_slice(&id.to_le_bytes());
        buf.extend_from_slice(&(count as u64).to_le_bytes());
        buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
        buf.extend_from_slice(key);
    }
    digest32(&[b"dpsmc/roster/v1", &buf])
}

impl TokenFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.tokens.len() * TOKEN_BYTES);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.parties.to_le_bytes());
        out.extend_from_slice(&self.roster_hash);
        for t in &self.tokens {
            out.extend_from_slice(&t.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MixnetError> {
        let bad = |msg: &str| MixnetError::Format(msg.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("file shorter than header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad("unsupported version"));
        }
        let n = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let parties = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
        let mut roster_hash = [0u8; 32];
        roster_hash.copy_from_slice(&bytes[17..HEADER_LEN]);
        let body = &bytes[HEADER_LEN..];
        if body.len() != n * TOKEN_BYTES {
            return Err(bad("token count does not match file length"));
        }
        let tokens = body
            .chunks_exact(TOKEN_BYTES)
            .map(|c| Token::from_slice(c).expect("exact chunk"))
            .collect();
        Ok(Self {
            parties,
            roster_hash,
            tokens,
        })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, MixnetError> {
        let bytes = fs::read(path).map_err(|e| MixnetError::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the file was written for this roster.
    pub fn check_roster(&self, expected: &[u8; 32]) -> Result<(), MixnetError> {
        if &self.roster_hash != expected {
            return Err(MixnetError::RosterMismatch);
        }
        Ok(())
    }
}
