//! Ownership-hiding token list built by a decryption mixnet.
//!
//! Every party wraps each of its tokens in `N` encryption layers (party 1
//! outermost). The parties then take turns: party `i` strips its layer
//! from every entry, shuffles the list and publishes it. After the last
//! party the list holds plaintext tokens whose owners only they know.
//! After each step every party checks the list size, and at the end every
//! party checks that all of its own tokens survived.

pub mod pke;
pub mod tokenfile;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use thiserror::Error;

pub use pke::{KeyPair, PublicKeyScheme, SimSealedBox};
pub use tokenfile::{roster_hash, TokenFile};

pub const TOKEN_BYTES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixnetError {
    #[error("authenticated decryption failed")]
    DecryptionFailure,
    #[error("entry {index} failed to decrypt at layer {layer}")]
    EntryDecryptionFailure { index: usize, layer: usize },
    #[error("token list tampering detected after mix step {step}: {verdict:?}")]
    Tampered { step: usize, verdict: Verdict },
    #[error("token collision while building the list")]
    TokenCollision,
    #[error("list is at layer {actual}, expected {expected}")]
    LayerMismatch { expected: usize, actual: usize },
    #[error("token list file: {0}")]
    Format(String),
    #[error("token list was built for a different party roster")]
    RosterMismatch,
}

/// A 128-bit random identifier for one data sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub [u8; TOKEN_BYTES]);

impl Token {
    pub fn random(rng: &mut dyn RngCore) -> Self {
        let mut bytes = [0u8; TOKEN_BYTES];
        rng.fill_bytes(&mut bytes);
        Token(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        Some(Token(bytes.try_into().ok()?))
    }
}

/// `n` distinct tokens.
pub fn generate_tokens(n: usize, rng: &mut dyn RngCore) -> Vec<Token> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = Token::random(rng);
        if seen.insert(t) {
            out.push(t);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenList {
    pub entries: Vec<Vec<u8>>,
    /// Decryption layers remaining on every entry.
    pub layer: usize,
    pub total_count: usize,
}

impl TokenList {
    pub fn new(entries: Vec<Vec<u8>>, layer: usize) -> Self {
        let total_count = entries.len();
        Self {
            entries,
            layer,
            total_count,
        }
    }

    /// Plaintext tokens; only meaningful at layer 0.
    pub fn tokens(&self) -> Result<Vec<Token>, MixnetError> {
        if self.layer != 0 {
            return Err(MixnetError::LayerMismatch {
                expected: 0,
                actual: self.layer,
            });
        }
        self.entries
            .iter()
            .map(|e| Token::from_slice(e).ok_or_else(|| MixnetError::Format("entry is not a token".into())))
            .collect()
    }
}

/// `Enc_k1(Enc_k2(... Enc_kN(token)))` for `public_keys = [k1, ..., kN]`.
pub fn onion_encrypt(
    scheme: &dyn PublicKeyScheme,
    token: &Token,
    public_keys: &[&[u8]],
    rng: &mut dyn RngCore,
) -> Vec<u8> {
    public_keys
        .iter()
        .rev()
        .fold(token.0.to_vec(), |inner, key| scheme.encrypt(key, &inner, rng))
}

/// Peels one layer and shuffles. Also returns the permutation used:
/// output entry `k` came from input entry `perm[k]`.
pub fn mix_step_traced(
    scheme: &dyn PublicKeyScheme,
    list: &TokenList,
    secret_key: &[u8],
    rng: &mut dyn RngCore,
) -> Result<(TokenList, Vec<usize>), MixnetError> {
    if list.layer == 0 {
        return Err(MixnetError::LayerMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let peeled = list
        .entries
        .par_iter()
        .enumerate()
        .map(|(index, entry)| {
            scheme
                .decrypt(secret_key, entry)
                .map_err(|_| MixnetError::EntryDecryptionFailure {
                    index,
                    layer: list.layer,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut perm: Vec<usize> = (0..peeled.len()).collect();
    perm.shuffle(rng);
    let mut slots: Vec<Option<Vec<u8>>> = peeled.into_iter().map(Some).collect();
    let entries = perm.iter().map(|&i| slots[i].take().unwrap()).collect();
    Ok((
        TokenList {
            entries,
            layer: list.layer - 1,
            total_count: list.total_count,
        },
        perm,
    ))
}

pub fn mix_step(
    scheme: &dyn PublicKeyScheme,
    list: &TokenList,
    secret_key: &[u8],
    rng: &mut dyn RngCore,
) -> Result<TokenList, MixnetError> {
    mix_step_traced(scheme, list, secret_key, rng).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Clean,
    CountChanged { expected: usize, found: usize },
    MissingOwnTokens { missing: usize },
}

impl Verdict {
    pub fn is_clean(&self) -> bool {
        matches!(self, Verdict::Clean)
    }
}

/// A party's check of a published list: the size must be unchanged, and
/// once plaintexts are visible all of the party's own tokens must be there.
pub fn verify_round(list: &TokenList, own_tokens: &[Token], expected_count: usize) -> Verdict {
    if list.entries.len() != expected_count || list.total_count != expected_count {
        return Verdict::CountChanged {
            expected: expected_count,
            found: list.entries.len(),
        };
    }
    if list.layer > 0 {
        return Verdict::Clean;
    }
    let present: HashSet<&[u8]> = list.entries.iter().map(Vec::as_slice).collect();
    let missing = own_tokens
        .iter()
        .filter(|t| !present.contains(&t.0[..]))
        .count();
    if missing > 0 {
        Verdict::MissingOwnTokens { missing }
    } else {
        Verdict::Clean
    }
}

/// One participant in list creation.
pub struct MixParty {
    pub keys: KeyPair,
    pub tokens: Vec<Token>,
}

/// Hook for a malicious mixer to alter the list it publishes.
pub trait MixTamper {
    /// Called after mixer at `position` (0-based) produced `list`.
    fn tamper(&self, position: usize, list: &mut TokenList);
}

/// Runs list creation end to end. Parties mix in slice order; every party
/// verifies every published list and the run aborts on the first failed check.
pub fn create_token_list(
    scheme: &dyn PublicKeyScheme,
    parties: &[MixParty],
    rngs: &mut [Box<dyn RngCore + Send>],
    tamper: Option<&dyn MixTamper>,
) -> Result<TokenList, MixnetError> {
    assert_eq!(parties.len(), rngs.len(), "one randomness source per party");
    let public_keys: Vec<&[u8]> = parties.iter().map(|p| p.keys.public_key.as_slice()).collect();
    let mut entries = Vec::new();
    for (party, rng) in parties.iter().zip(rngs.iter_mut()) {
        for token in &party.tokens {
            entries.push(onion_encrypt(scheme, token, &public_keys, rng.as_mut()));
        }
    }
    let mut list = TokenList::new(entries, parties.len());
    let expected = list.total_count;

    for (position, party) in parties.iter().enumerate() {
        let mut next = mix_step(scheme, &list, &party.keys.secret_key, rngs[position].as_mut())?;
        if let Some(t) = tamper {
            t.tamper(position, &mut next);
        }
        for checker in parties {
            let verdict = verify_round(&next, &checker.tokens, expected);
            if !verdict.is_clean() {
                return Err(MixnetError::Tampered {
                    step: position,
                    verdict,
                });
            }
        }
        list = next;
    }
    let unique: HashSet<&Vec<u8>> = list.entries.iter().collect();
    if unique.len() != list.entries.len() {
        return Err(MixnetError::TokenCollision);
    }
    Ok(list)
}
