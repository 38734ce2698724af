//! Protocol message framing.
//!
//! ```text
//! [protocol u8][round u64][sender u32][node u32][len u32][len × element bytes]
//! ```
//! All integers little-endian. The trailing `len` + elements block is exactly
//! [`FixedVector::to_bytes`]. Codec parameters are not on the wire.

use crate::fixedpoint::{FixedPointCodec, FixedVector};

use super::SecureSumError;

pub const HEADER_LEN: usize = 1 + 8 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ProtocolId {
    /// Masked client message to the pairwise aggregator.
    Pairwise = 1,
    /// Client share to a compute node.
    DcaShare = 2,
    /// Compute node partial sum to the master.
    DcaReport = 3,
    /// Aggregate broadcast from aggregator or master.
    Result = 4,
}

impl TryFrom<u8> for ProtocolId {
    type Error = SecureSumError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Ok(match value {
            1 => Self::Pairwise,
            2 => Self::DcaShare,
            3 => Self::DcaReport,
            4 => Self::Result,
            other => return Err(SecureSumError::Wire(format!("unknown protocol id {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub protocol: ProtocolId,
    pub round: u64,
    pub sender: u32,
    /// Target compute node for shares, the reporting node for reports; 0 otherwise.
    pub node: u32,
    pub payload: FixedVector,
}

impl WireMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.payload.codec(), self.payload.len()));
        out.push(self.protocol as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.node.to_le_bytes());
        self.payload.write_bytes(&mut out);
        out
    }

    pub fn encoded_len(codec: FixedPointCodec, len: usize) -> usize {
        HEADER_LEN + FixedVector::encoded_len(codec, len)
    }

    pub fn decode(codec: FixedPointCodec, bytes: &[u8]) -> Result<Self, SecureSumError> {
        if bytes.len() < HEADER_LEN {
            return Err(SecureSumError::Wire(format!(
                "message of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let protocol = ProtocolId::try_from(bytes[0])?;
        let round = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let sender = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        let node = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
        let (payload, used) = FixedVector::from_bytes(codec, &bytes[HEADER_LEN..])?;
        if HEADER_LEN + used != bytes.len() {
            return Err(SecureSumError::Wire(format!(
                "{} trailing bytes after payload",
                bytes.len() - HEADER_LEN - used
            )));
        }
        Ok(Self {
            protocol,
            round,
            sender,
            node,
            payload,
        })
    }
}
