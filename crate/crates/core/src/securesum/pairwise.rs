//! Pairwise-mask summation for a small number of well-resourced clients.
//!
//! Every pair `(i, j)` shares a seed. For round counter `c` and element `e`
//! both sides compute `BLAKE2b-64(seed_ij ‖ c ‖ e) mod R`; the party with the
//! larger id negates it, so `k_ij + k_ji ≡ 0 (mod R)` and all masks vanish
//! from the aggregate.

use std::collections::BTreeMap;

use crate::fixedpoint::{FixedPointCodec, FixedVector};
use crate::keystream::{hash_u64, Seed};

use super::SecureSumError;

#[derive(Debug, Clone)]
pub struct PairwiseKeyring {
    party_id: u32,
    pair_seeds: BTreeMap<u32, Seed>,
    round_counter: u64,
}

impl PairwiseKeyring {
    pub fn new(party_id: u32) -> Self {
        Self {
            party_id,
            pair_seeds: BTreeMap::new(),
            round_counter: 0,
        }
    }

    /// Stand-in for a completed key exchange: the seed of each pair is
    /// derived from a common setup seed and the (unordered) pair of ids.
    pub fn from_setup_seed(setup: &Seed, party_id: u32, peers: impl IntoIterator<Item = u32>) -> Self {
        let mut ring = Self::new(party_id);
        for peer in peers {
            if peer != party_id {
                ring.insert_peer(peer, pair_seed(setup, party_id, peer));
            }
        }
        ring
    }

    pub fn insert_peer(&mut self, peer: u32, seed: Seed) {
        self.pair_seeds.insert(peer, seed);
    }

    pub fn party_id(&self) -> u32 {
        self.party_id
    }

    pub fn peers(&self) -> impl Iterator<Item = u32> + '_ {
        self.pair_seeds.keys().copied()
    }

    pub fn seed_for(&self, peer: u32) -> Option<&Seed> {
        self.pair_seeds.get(&peer)
    }

    pub fn round_counter(&self) -> u64 {
        self.round_counter
    }

    /// Returns the current counter and advances it.
    pub fn next_counter(&mut self) -> u64 {
        let c = self.round_counter;
        self.round_counter += 1;
        c
    }

    /// The mask `k_ij` this party applies for `peer`.
    pub fn pair_mask(
        &self,
        peer: u32,
        codec: FixedPointCodec,
        counter: u64,
        len: usize,
    ) -> Result<FixedVector, SecureSumError> {
        let seed = self
            .pair_seeds
            .get(&peer)
            .ok_or(SecureSumError::MissingPeerSeed {
                party: self.party_id,
                peer,
            })?;
        let words = (0..len as u64).map(|e| hash_u64(seed, counter, e));
        let mask = FixedVector::from_words_reduced(codec, words);
        Ok(if self.party_id > peer {
            mask.neg_mod()
        } else {
            mask
        })
    }

    /// `Σ_{j ≠ i} k_ij mod R` over the peers in `roster`.
    pub fn derive_pairwise_masks(
        &self,
        roster: &[u32],
        codec: FixedPointCodec,
        counter: u64,
        len: usize,
    ) -> Result<FixedVector, SecureSumError> {
        let mask = codec.mask();
        let modulus = codec.modulus();
        let mut acc = vec![0u64; len];
        for &peer in roster.iter().filter(|&&p| p != self.party_id) {
            let seed = self
                .pair_seeds
                .get(&peer)
                .ok_or(SecureSumError::MissingPeerSeed {
                    party: self.party_id,
                    peer,
                })?;
            let negate = self.party_id > peer;
            for (e, slot) in acc.iter_mut().enumerate() {
                let k = hash_u64(seed, counter, e as u64) & mask;
                let k = if negate { (modulus - k) & mask } else { k };
                *slot = (*slot + k) & mask;
            }
        }
        Ok(FixedVector::from_raw(codec, acc).expect("reduced by construction"))
    }
}

/// Seed shared by `a` and `b`, symmetric in its arguments.
pub fn pair_seed(setup: &Seed, a: u32, b: u32) -> Seed {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    setup.derive("pairwise", &[lo as u64, hi as u64])
}

/// `y + Σ_{j ≠ i} k_ij mod R`.
pub fn pairwise_encrypt(
    y: &FixedVector,
    keyring: &PairwiseKeyring,
    roster: &[u32],
    counter: u64,
) -> Result<FixedVector, SecureSumError> {
    let masks = keyring.derive_pairwise_masks(roster, y.codec(), counter, y.len())?;
    Ok(y.add_mod(&masks)?)
}

/// Modular sum of all `expected` client messages. A missing message aborts the round.
pub fn pairwise_aggregate(
    messages: &[FixedVector],
    expected: usize,
) -> Result<FixedVector, SecureSumError> {
    if messages.is_empty() || messages.len() != expected {
        return Err(SecureSumError::IncompleteRound {
            phase: "pairwise aggregation",
            expected,
            received: messages.len(),
        });
    }
    Ok(FixedVector::sum_mod(messages.iter())?.expect("non-empty"))
}

/// Splits a client roster into consecutive masking groups of `group_size`.
/// A trailing group of one would be unmasked, so it joins the previous group.
pub fn pairwise_groups(roster: &[u32], group_size: Option<usize>) -> Vec<Vec<u32>> {
    let size = group_size.unwrap_or(roster.len()).max(2);
    let mut groups: Vec<Vec<u32>> = roster.chunks(size).map(<[u32]>::to_vec).collect();
    if groups.len() > 1 && groups.last().map(Vec::len) == Some(1) {
        let last = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(last);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystream::Seed;

    fn codec() -> FixedPointCodec {
        FixedPointCodec::default()
    }

    #[test]
    fn two_party_masks_cancel() {
        let setup = Seed::from_u64(1);
        let a = PairwiseKeyring::from_setup_seed(&setup, 0, [1]);
        let b = PairwiseKeyring::from_setup_seed(&setup, 1, [0]);
        let roster = [0, 1];
        let ma = a.derive_pairwise_masks(&roster, codec(), 0, 8).unwrap();
        let mb = b.derive_pairwise_masks(&roster, codec(), 0, 8).unwrap();
        assert!(ma.add_mod(&mb).unwrap().values().iter().all(|&v| v == 0));
        assert!(ma.values().iter().any(|&v| v != 0));
    }

    #[test]
    fn five_party_masks_cancel() {
        let setup = Seed::from_u64(2);
        let roster: Vec<u32> = (0..5).collect();
        let total = FixedVector::sum_mod(
            roster
                .iter()
                .map(|&i| {
                    PairwiseKeyring::from_setup_seed(&setup, i, roster.clone())
                        .derive_pairwise_masks(&roster, codec(), 3, 3)
                        .unwrap()
                })
                .collect::<Vec<_>>()
                .iter(),
        )
        .unwrap()
        .unwrap();
        assert_eq!(total.values(), &[0, 0, 0]);
    }

    #[test]
    fn single_party_is_unmasked() {
        let ring = PairwiseKeyring::new(0);
        let y = codec().encode(&[1.0, -2.0]).unwrap();
        assert_eq!(pairwise_encrypt(&y, &ring, &[0], 0).unwrap(), y);
    }

    #[test]
    fn hand_computed_mod_100_example() {
        // R = 100 is not a power of two, so the arithmetic is checked directly.
        let (r, y1, y2, k12, k21) = (100u64, 3u64, 4u64, 17u64, 83u64);
        assert_eq!((k12 + k21) % r, 0);
        let (m1, m2) = ((y1 + k12) % r, (y2 + k21) % r);
        assert_eq!((m1, m2), (20, 87));
        assert_eq!((m1 + m2) % r, 7);
    }

    #[test]
    fn missing_seed_is_reported() {
        let ring = PairwiseKeyring::from_setup_seed(&Seed::from_u64(3), 0, [1]);
        let err = ring
            .derive_pairwise_masks(&[0, 1, 2], codec(), 0, 1)
            .unwrap_err();
        assert_eq!(err, SecureSumError::MissingPeerSeed { party: 0, peer: 2 });
    }

    #[test]
    fn aggregate_rejects_missing_messages() {
        assert!(matches!(
            pairwise_aggregate(&[], 0),
            Err(SecureSumError::IncompleteRound { .. })
        ));
        let m = codec().encode(&[1.0]).unwrap();
        assert!(pairwise_aggregate(&[m.clone()], 2).is_err());
        assert_eq!(pairwise_aggregate(&[m.clone()], 1).unwrap(), m);
    }

    #[test]
    fn groups_absorb_trailing_singleton() {
        let roster: Vec<u32> = (0..7).collect();
        assert_eq!(
            pairwise_groups(&roster, Some(3)),
            vec![vec![0, 1, 2], vec![3, 4, 5, 6]]
        );
        assert_eq!(pairwise_groups(&roster, None), vec![roster.clone()]);
        assert_eq!(pairwise_groups(&roster[..6], Some(2)).len(), 3);
    }

    #[test]
    fn counter_advances() {
        let mut ring = PairwiseKeyring::new(4);
        assert_eq!(ring.next_counter(), 0);
        assert_eq!(ring.next_counter(), 1);
        assert_eq!(ring.round_counter(), 2);
    }
}
