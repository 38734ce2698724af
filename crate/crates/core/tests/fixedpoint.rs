use dpsmc::fixedpoint::{FixedPointCodec, FixedVector};
use proptest::prelude::*;

fn codec() -> impl Strategy<Value = FixedPointCodec> {
    (0u32..=24).prop_flat_map(|f| (Just(f), (f + 8).min(63)..=63)).prop_map(|(f, m)| FixedPointCodec::new(f, m).unwrap())
}

/// Values whose pairwise sums stay in range.
fn pair_in_range(c: FixedPointCodec, len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let half = c.max_magnitude() / 2.0 - 1.0;
    (
        prop::collection::vec(-half..half, len),
        prop::collection::vec(-half..half, len),
    )
}

proptest! {
    #[test]
    fn quantization_error_is_at_most_half_ulp(c in codec(), x in prop::collection::vec(-1e3f64..1e3, 1..32)) {
        prop_assume!(x.iter().all(|v| v.abs() < c.max_magnitude()));
        let back = c.decode(&c.encode(&x).unwrap());
        let ulp = 2f64.powi(-(c.frac_bits() as i32));
        for (a, b) in x.iter().zip(&back) {
            // the half-ulp bound, plus the f64 rounding of the scaled value
            prop_assert!((a - b).abs() <= ulp / 2.0 + a.abs() * f64::EPSILON * 2.0);
        }
    }

    #[test]
    fn addition_is_exact_after_encoding((c, (x, y)) in codec().prop_flat_map(|c| (Just(c), pair_in_range(c, 8)))) {
        let ex = c.encode(&x).unwrap();
        let ey = c.encode(&y).unwrap();
        let sum = c.decode(&ex.add_mod(&ey).unwrap());
        let dx = c.decode(&ex);
        let dy = c.decode(&ey);
        for i in 0..x.len() {
            // no rounding beyond the encode step: exact in the integer domain
            let scale = c.scale();
            prop_assert_eq!((sum[i] * scale).round(), (dx[i] * scale).round() + (dy[i] * scale).round());
        }
    }

    #[test]
    fn add_mod_is_an_abelian_group(c in codec(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut draw = || FixedVector::from_words_reduced(c, (0..6).map(|_| rng.random::<u64>()));
        let (a, b, z) = (draw(), draw(), draw());
        prop_assert_eq!(a.add_mod(&b).unwrap(), b.add_mod(&a).unwrap());
        prop_assert_eq!(a.add_mod(&b).unwrap().add_mod(&z).unwrap(), a.add_mod(&b.add_mod(&z).unwrap()).unwrap());
        prop_assert_eq!(a.add_mod(&FixedVector::zeros(c, 6)).unwrap(), a.clone());
        prop_assert_eq!(a.add_mod(&a.neg_mod()).unwrap(), FixedVector::zeros(c, 6));
    }

    #[test]
    fn encoded_negation_is_the_inverse(c in codec(), x in prop::collection::vec(-100.0f64..100.0, 1..16)) {
        prop_assume!(c.max_magnitude() > 100.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let s = c.encode(&x).unwrap().add_mod(&c.encode(&neg).unwrap()).unwrap();
        prop_assert_eq!(s, FixedVector::zeros(c, x.len()));
    }

    #[test]
    fn wire_round_trip(c in codec(), seed in any::<u64>(), len in 0usize..40) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let v = FixedVector::from_words_reduced(c, (0..len).map(|_| rng.random::<u64>()));
        let bytes = v.to_bytes();
        prop_assert_eq!(bytes.len(), FixedVector::encoded_len(c, len));
        let (back, used) = FixedVector::from_bytes(c, &bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, v);
    }

    #[test]
    fn clipped_encoding_never_fails_and_agrees_in_range(c in codec(), x in prop::collection::vec(prop::num::f64::ANY, 1..16)) {
        let clipped = c.encode_clipped(&x);
        prop_assert_eq!(clipped.len(), x.len());
        if let Ok(exact) = c.encode(&x) {
            prop_assert_eq!(exact, clipped);
        }
    }
}

#[test]
fn overflow_is_reported_with_index() {
    let c = FixedPointCodec::new(4, 10).unwrap();
    let err = c.encode(&[0.0, 1e6]).unwrap_err();
    assert!(err.to_string().contains("1000000"), "{err}");
}
