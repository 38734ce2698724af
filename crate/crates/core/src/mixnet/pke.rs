//! Randomized authenticated public-key encryption used for the onions.
//!
//! [`SimSealedBox`] is a sealed-box style hybrid: an ephemeral
//! Diffie-Hellman agreement in the multiplicative group modulo the Mersenne
//! prime `2^61 - 1`, a BLAKE2b keystream and a BLAKE2b tag. The group is far
//! too small for real deployments; it exists so simulations are fast and
//! self-contained. Production schemes plug in through [`PublicKeyScheme`].

use blake2::{Blake2b512, Digest};
use rand::RngCore;

use crate::keystream::digest32;

use super::MixnetError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub party_id: u32,
    pub public_key: Vec<u8>,
    pub secret_key: Vec<u8>,
}

pub trait PublicKeyScheme: Send + Sync {
    fn generate(&self, party_id: u32, rng: &mut dyn RngCore) -> KeyPair;
    fn encrypt(&self, public_key: &[u8], plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8>;
    fn decrypt(&self, secret_key: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, MixnetError>;
    /// Ciphertext length minus plaintext length.
    fn overhead(&self) -> usize;
}

const P: u64 = (1 << 61) - 1;
const GENERATOR: u64 = 37;
const ELEMENT_BYTES: usize = 8;
const TAG_BYTES: usize = 16;

fn mul_mod(a: u64, b: u64) -> u64 {
    let prod = a as u128 * b as u128;
    let lo = (prod as u64) & P;
    let hi = (prod >> 61) as u64;
    let mut r = lo + hi;
    if r >= P {
        r -= P;
    }
    r
}

fn pow_mod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= P;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base);
        }
        base = mul_mod(base, base);
        exp >>= 1;
    }
    acc
}

fn random_exponent(rng: &mut dyn RngCore) -> u64 {
    loop {
        let e = rng.next_u64() & P;
        if e >= 2 && e < P - 1 {
            return e;
        }
    }
}

fn read_element(bytes: &[u8]) -> Option<u64> {
    let v = u64::from_le_bytes(bytes.get(..ELEMENT_BYTES)?.try_into().ok()?);
    (v > 1 && v < P).then_some(v)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimSealedBox;

struct SessionKeys {
    stream: [u8; 32],
    mac: [u8; 32],
}

impl SimSealedBox {
    fn session(ephemeral: u64, recipient: u64, shared: u64) -> SessionKeys {
        let master = digest32(&[
            b"sim-sealed-box/v1",
            &ephemeral.to_le_bytes(),
            &recipient.to_le_bytes(),
            &shared.to_le_bytes(),
        ]);
        SessionKeys {
            stream: digest32(&[b"stream", &master]),
            mac: digest32(&[b"mac", &master]),
        }
    }

    fn apply_keystream(key: &[u8; 32], data: &mut [u8]) {
        for (block, chunk) in data.chunks_mut(64).enumerate() {
            let pad = Blake2b512::new()
                .chain_update(key)
                .chain_update((block as u64).to_le_bytes())
                .finalize();
            for (b, p) in chunk.iter_mut().zip(pad.iter()) {
                *b ^= p;
            }
        }
    }

    fn tag(key: &[u8; 32], header: &[u8], body: &[u8]) -> [u8; TAG_BYTES] {
        let full = digest32(&[key, header, body]);
        let mut out = [0u8; TAG_BYTES];
        out.copy_from_slice(&full[..TAG_BYTES]);
        out
    }
}

impl PublicKeyScheme for SimSealedBox {
    fn generate(&self, party_id: u32, rng: &mut dyn RngCore) -> KeyPair {
        let secret = random_exponent(rng);
        let public = pow_mod(GENERATOR, secret);
        let mut secret_key = secret.to_le_bytes().to_vec();
        secret_key.extend_from_slice(&public.to_le_bytes());
        KeyPair {
            party_id,
            public_key: public.to_le_bytes().to_vec(),
            secret_key,
        }
    }

    fn encrypt(&self, public_key: &[u8], plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let recipient = read_element(public_key).expect("malformed public key");
        let eph_secret = random_exponent(rng);
        let ephemeral = pow_mod(GENERATOR, eph_secret);
        let shared = pow_mod(recipient, eph_secret);
        let keys = Self::session(ephemeral, recipient, shared);

        let mut out = Vec::with_capacity(plaintext.len() + self.overhead());
        out.extend_from_slice(&ephemeral.to_le_bytes());
        let mut body = plaintext.to_vec();
        Self::apply_keystream(&keys.stream, &mut body);
        let tag = Self::tag(&keys.mac, &out, &body);
        out.extend_from_slice(&body);
        out.extend_from_slice(&tag);
        out
    }

    fn decrypt(&self, secret_key: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, MixnetError> {
        let fail = || MixnetError::DecryptionFailure;
        if secret_key.len() != 2 * ELEMENT_BYTES || ciphertext.len() < self.overhead() {
            return Err(fail());
        }
        let secret = u64::from_le_bytes(secret_key[..8].try_into().unwrap());
        let recipient = read_element(&secret_key[8..]).ok_or_else(fail)?;
        let ephemeral = read_element(ciphertext).ok_or_else(fail)?;
        let shared = pow_mod(ephemeral, secret);
        let keys = Self::session(ephemeral, recipient, shared);

        let (header, rest) = ciphertext.split_at(ELEMENT_BYTES);
        let (body, tag) = rest.split_at(rest.len() - TAG_BYTES);
        let expected = Self::tag(&keys.mac, header, body);
        // constant-time comparison is not a goal of the simulation scheme
        if expected[..] != tag[..] {
            return Err(fail());
        }
        let mut plain = body.to_vec();
        Self::apply_keystream(&keys.stream, &mut plain);
        Ok(plain)
    }

    fn overhead(&self) -> usize {
        ELEMENT_BYTES + TAG_BYTES
    }
}
