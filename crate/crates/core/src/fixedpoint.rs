//! Fixed-point encoding of real vectors as integers modulo `R = 2^modulus_bits`.
//!
//! All protocol messages are [`FixedVector`]s. Quantization happens once, in
//! [`FixedPointCodec::encode`]; modular addition afterwards is exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FRAC_BITS: u32 = 16;
pub const DEFAULT_MODULUS_BITS: u32 = 32;
/// Keeps `a + b` of two reduced values inside a `u64`.
pub const MAX_MODULUS_BITS: u32 = 63;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedPointError {
    #[error("invalid codec: {0}")]
    InvalidCodec(String),
    #[error("value {value} at index {index} is outside the representable range ±{limit}")]
    Overflow { index: usize, value: f64, limit: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("vectors were encoded under different codecs")]
    CodecMismatch,
    #[error("element {index} = {value} is not reduced modulo R")]
    NotReduced { index: usize, value: u64 },
    #[error("truncated fixed-point payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointCodec {
    frac_bits: u32,
    modulus_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self {
            frac_bits: DEFAULT_FRAC_BITS,
            modulus_bits: DEFAULT_MODULUS_BITS,
        }
    }
}

impl FixedPointCodec {
    pub fn new(frac_bits: u32, modulus_bits: u32) -> Result<Self, FixedPointError> {
        let codec = Self {
            frac_bits,
            modulus_bits,
        };
        codec.validate()?;
        Ok(codec)
    }

    /// Checks the invariants; useful after deserializing a config.
    pub fn validate(&self) -> Result<(), FixedPointError> {
        if self.modulus_bits > MAX_MODULUS_BITS {
            return Err(FixedPointError::InvalidCodec(format!(
                "modulus_bits {} exceeds {MAX_MODULUS_BITS}",
                self.modulus_bits
            )));
        }
        if self.modulus_bits < self.frac_bits + 2 {
            return Err(FixedPointError::InvalidCodec(format!(
                "modulus_bits {} leaves no room for sign and integer part with frac_bits {}",
                self.modulus_bits, self.frac_bits
            )));
        }
        if self.frac_bits > 52 {
            return Err(FixedPointError::InvalidCodec(format!(
                "frac_bits {} exceeds f64 precision",
                self.frac_bits
            )));
        }
        Ok(())
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn modulus_bits(&self) -> u32 {
        self.modulus_bits
    }

    /// `R`.
    pub fn modulus(&self) -> u64 {
        1u64 << self.modulus_bits
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        self.modulus() - 1
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Largest integer magnitude an encoded value may carry (`R/2 - 1`).
    fn max_integer(&self) -> i64 {
        (self.modulus() / 2) as i64 - 1
    }

    /// Largest real magnitude that encodes without clipping.
    pub fn max_magnitude(&self) -> f64 {
        self.max_integer() as f64 / self.scale()
    }

    /// Worst-case absolute rounding error of [`encode`](Self::encode).
    pub fn quantization_bound(&self) -> f64 {
        0.5 / self.scale()
    }

    /// Bytes per element on the wire.
    pub fn element_bytes(&self) -> usize {
        (self.modulus_bits as usize).div_ceil(8)
    }

    #[inline]
    fn reduce_signed(&self, v: i64) -> u64 {
        (v as u64) & self.mask()
    }

    /// Encodes raw data. Values outside the range are a configuration error.
    pub fn encode(&self, x: &[f64]) -> Result<FixedVector, FixedPointError> {
        let limit = self.max_integer();
        let values = x
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                let scaled = (value * self.scale()).round();
                if !(scaled.abs() <= limit as f64) {
                    return Err(FixedPointError::Overflow {
                        index,
                        value,
                        limit: self.max_magnitude(),
                    });
                }
                Ok(self.reduce_signed(scaled as i64))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FixedVector {
            values,
            codec: *self,
        })
    }

    /// Encodes values that carry DP noise: out-of-range entries are clamped
    /// to the representable range instead of failing. NaN encodes as zero.
    pub fn encode_clipped(&self, x: &[f64]) -> FixedVector {
        let limit = self.max_integer() as f64;
        let values = x
            .iter()
            .map(|&value| {
                let scaled = (value * self.scale()).round();
                let scaled = if scaled.is_nan() {
                    0.0
                } else {
                    scaled.clamp(-limit, limit)
                };
                self.reduce_signed(scaled as i64)
            })
            .collect();
        FixedVector {
            values,
            codec: *self,
        }
    }

    /// Values in `[R/2, R)` are negative.
    pub fn decode(&self, v: &FixedVector) -> Vec<f64> {
        let half = self.modulus() / 2;
        let modulus = self.modulus() as i128;
        v.values
            .iter()
            .map(|&raw| {
                let signed = if raw >= half {
                    raw as i128 - modulus
                } else {
                    raw as i128
                };
                signed as f64 / self.scale()
            })
            .collect()
    }
}

/// Integers in `[0, R)` tagged with the codec that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixedVector {
    values: Vec<u64>,
    codec: FixedPointCodec,
}

impl FixedVector {
    pub fn zeros(codec: FixedPointCodec, len: usize) -> Self {
        Self {
            values: vec![0; len],
            codec,
        }
    }

    pub fn from_raw(codec: FixedPointCodec, values: Vec<u64>) -> Result<Self, FixedPointError> {
        let modulus = codec.modulus();
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v >= modulus) {
            return Err(FixedPointError::NotReduced { index, value });
        }
        Ok(Self { values, codec })
    }

    /// Reduces arbitrary words modulo `R`; used for uniformly random masks.
    pub fn from_words_reduced(codec: FixedPointCodec, words: impl IntoIterator<Item = u64>) -> Self {
        let mask = codec.mask();
        Self {
            values: words.into_iter().map(|w| w & mask).collect(),
            codec,
        }
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.codec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_compatible(&self, other: &FixedVector) -> Result<(), FixedPointError> {
        if self.codec != other.codec {
            return Err(FixedPointError::CodecMismatch);
        }
        if self.len() != other.len() {
            return Err(FixedPointError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    /// Elementwise `(a + b) mod R`.
    pub fn add_mod(&self, other: &FixedVector) -> Result<FixedVector, FixedPointError> {
        let mut out = self.clone();
        out.add_assign_mod(other)?;
        Ok(out)
    }

    pub fn add_assign_mod(&mut self, other: &FixedVector) -> Result<(), FixedPointError> {
        self.check_compatible(other)?;
        let mask = self.codec.mask();
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = (*a + *b) & mask;
        }
        Ok(())
    }

    pub fn sub_assign_mod(&mut self, other: &FixedVector) -> Result<(), FixedPointError> {
        self.check_compatible(other)?;
        let mask = self.codec.mask();
        let modulus = self.codec.modulus();
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = (*a + (modulus - *b)) & mask;
        }
        Ok(())
    }

    /// Additive inverse modulo `R`.
    pub fn neg_mod(&self) -> FixedVector {
        let mask = self.codec.mask();
        let modulus = self.codec.modulus();
        FixedVector {
            values: self.values.iter().map(|&v| (modulus - v) & mask).collect(),
            codec: self.codec,
        }
    }

    /// Sums a non-empty set of equal-length vectors modulo `R`.
    pub fn sum_mod<'a>(
        mut vectors: impl Iterator<Item = &'a FixedVector>,
    ) -> Result<Option<FixedVector>, FixedPointError> {
        let Some(first) = vectors.next() else {
            return Ok(None);
        };
        let mut acc = first.clone();
        for v in vectors {
            acc.add_assign_mod(v)?;
        }
        Ok(Some(acc))
    }

    /// Wire form: `u32` LE element count, then each element as
    /// `ceil(modulus_bits / 8)` little-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = self.codec.element_bytes();
        let mut out = Vec::with_capacity(4 + width * self.len());
        self.write_bytes(&mut out);
        out
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        let width = self.codec.element_bytes();
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes()[..width]);
        }
    }

    pub fn encoded_len(codec: FixedPointCodec, len: usize) -> usize {
        4 + codec.element_bytes() * len
    }

    /// Parses the wire form, returning the vector and the number of bytes read.
    pub fn from_bytes(
        codec: FixedPointCodec,
        bytes: &[u8],
    ) -> Result<(FixedVector, usize), FixedPointError> {
        if bytes.len() < 4 {
            return Err(FixedPointError::Truncated {
                needed: 4,
                available: bytes.len(),
            });
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let width = codec.element_bytes();
        let needed = 4 + len * width;
        if bytes.len() < needed {
            return Err(FixedPointError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        let values = bytes[4..needed]
            .chunks_exact(width)
            .map(|chunk| {
                let mut word = [0u8; 8];
                word[..width].copy_from_slice(chunk);
                u64::from_le_bytes(word)
            })
            .collect();
        Ok((FixedVector::from_raw(codec, values)?, needed))
    }
}
