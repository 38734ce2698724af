//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use dpsmc::dpnoise::{plan_noise, sample_noise_share, NoiseMode};
use dpsmc::fixedpoint::{FixedPointCodec, FixedVector};
use dpsmc::harness::bench::{dca_round_times, fold_increase, pairwise_mask_times};
use dpsmc::keystream::Seed;
use dpsmc::learner::data::gaussian_mixture;
use dpsmc::learner::{
    run_training, Dataset, Model, ModelKind, NeighbourRelation, Partition, PrivacyConfig, ProjectionConfig, Regime,
    TrainConfig, TrainOptions, TrainReport, TrustedNoise,
};
use dpsmc::mixnet::{
    create_token_list, generate_tokens, mix_step_traced, onion_encrypt, MixParty, MixTamper,
    PublicKeyScheme, SimSealedBox, Token, TokenList,
};
use dpsmc::projection::{generate_projection, solve_sensitivity, ProjectionSpec};
use dpsmc::sampling::{amplification_curve, BatchScheme, Hypergeometric};
use dpsmc::securesum::{ClientProtocol, InProcessSummation, ProtocolConfig, SecureSummation};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Gamma};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- 1

fn oracle_sum(codec: FixedPointCodec, inputs: &[FixedVector]) -> Vec<u64> {
    (0..inputs[0].len())
        .map(|e| {
            let s: u128 = inputs.iter().map(|v| v.values()[e] as u128).sum();
            (s % codec.modulus() as u128) as u64
        })
        .collect()
}

fn random_inputs(codec: FixedPointCodec, n: usize, len: usize, rng: &mut impl Rng) -> Vec<FixedVector> {
    (0..n)
        .map(|_| FixedVector::from_words_reduced(codec, (0..len).map(|_| rng.random::<u64>())))
        .collect()
}

fn secure_sum_exactness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for instance in 0..200 {
        let bits = rng.random_range(8..=63);
        let codec = FixedPointCodec::new(bits.min(16) / 2, bits).unwrap();
        let n = rng.random_range(2..=20);
        let group = rng.random_bool(0.5).then(|| rng.random_range(2..=8));
        let ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
        let mut sum = InProcessSummation::new(
            &ProtocolConfig::Pairwise { group_size: group },
            &ids,
            &Seed::from_u64(rng.random()),
            codec,
        )
        .unwrap();
        let inputs = random_inputs(codec, n, rng.random_range(1..=32), &mut rng);
        let out = sum.sum_round(instance, &inputs).unwrap();
        ensure(out.sum.values() == &oracle_sum(codec, &inputs)[..], format!("pairwise instance {instance}"))?;
    }
    for instance in 0..200 {
        let codec = FixedPointCodec::default();
        let n = rng.random_range(2..=100);
        let m = rng.random_range(1..=10u32);
        let mut subsets = BTreeMap::new();
        for c in 0..n as u32 {
            if rng.random_bool(0.2) {
                let mut nodes: Vec<u32> = (0..m).filter(|_| rng.random_bool(0.5)).collect();
                if nodes.is_empty() {
                    nodes.push(rng.random_range(0..m));
                }
                subsets.insert(c, nodes);
            }
        }
        let ids: Vec<u32> = (0..n as u32).collect();
        let mut sum = InProcessSummation::new(
            &ProtocolConfig::Dca { nodes: m, subsets },
            &ids,
            &Seed::from_u64(rng.random()),
            codec,
        )
        .unwrap();
        let inputs = random_inputs(codec, n, rng.random_range(1..=32), &mut rng);
        let out = sum.sum_round(instance, &inputs).unwrap();
        ensure(out.sum.values() == &oracle_sum(codec, &inputs)[..], format!("dca instance {instance}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("400 instances exact in {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn mask_uniformity() -> Check {
    let codec = FixedPointCodec::default();
    let ids: Vec<u32> = (0..5).collect();
    let payload = codec.encode(&[1.5, -2.0]).unwrap();
    let mut out = Vec::new();
    for (name, protocol) in [
        ("pairwise", ProtocolConfig::Pairwise { group_size: None }),
        (
            "dca",
            ProtocolConfig::Dca {
                nodes: 3,
                subsets: BTreeMap::new(),
            },
        ),
    ] {
        let (clients, _) = ClientProtocol::for_roster(&protocol, &ids, &Seed::from_u64(21)).unwrap();
        let values = (0..100_000u64).map(|round| clients[2].client_messages(round, &payload).unwrap()[0].1.values()[1]);
        let p = common::chi_square_uniform_p(&common::top_bits_histogram(values, codec.modulus_bits(), 8));
        ensure(p > 0.01, format!("{name} p = {p}"))?;
        out.push(format!("{name} p={p:.3}"));
    }
    Ok(out.join(", "))
}

// ---------------------------------------------------------------- 3

fn noise_plan_variance() -> Check {
    let trials = 100_000;
    let sigma = 1.5;
    let n = 10;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut out = Vec::new();
    for (mode, t, removed) in [
        (NoiseMode::Tee, 0, 0),
        (NoiseMode::CollusionRobust, 3, 0),
        (NoiseMode::Tee, 0, 1),
        (NoiseMode::CollusionRobust, 3, 3),
    ] {
        let plan = plan_noise(sigma, n, t, mode).unwrap();
        let sums: Vec<f64> = (0..trials)
            .map(|_| (removed..n).map(|_| sample_noise_share(&plan, 1, &mut rng)[0]).sum())
            .collect();
        let measured = common::variance(&sums);
        let predicted = plan.residual_variance(removed);
        ensure(
            (measured / predicted - 1.0).abs() < 0.05,
            format!("{mode:?} T={t} removed={removed}: {measured} vs {predicted}"),
        )?;
        if removed == 0 {
            let want = match mode {
                NoiseMode::Tee => sigma * sigma,
                NoiseMode::CollusionRobust => sigma * sigma * n as f64 / (n - t - 1) as f64,
            };
            ensure((predicted / want - 1.0).abs() < 1e-12, "plan variance")?;
        }
        if mode == NoiseMode::Tee && removed == 1 {
            ensure((predicted / (sigma * sigma) - 0.9).abs() < 1e-12, "tee residual is not 0.9 sigma^2")?;
        }
        out.push(format!("{}/{}", (measured / predicted * 1000.0).round() / 1000.0, removed));
    }
    Ok(format!("measured/predicted (removed): {}", out.join(" ")))
}

// ---------------------------------------------------------------- 4

#[derive(Clone, Copy, Debug)]
enum Attack {
    Drop,
    Garbage,
    FreshOnion,
    Duplicate,
}

struct Attacker {
    at: usize,
    attack: Attack,
    keys: Vec<Vec<u8>>,
    seed: u64,
}

impl MixTamper for Attacker {
    fn tamper(&self, position: usize, list: &mut TokenList) {
        if position != self.at || list.entries.len() < 2 {
            return;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        let victim = rng.random_range(0..list.entries.len());
        match self.attack {
            Attack::Drop => {
                list.entries.remove(victim);
            }
            Attack::Garbage => {
                let len = list.entries[victim].len();
                list.entries[victim] = (0..len).map(|_| rng.random()).collect();
            }
            Attack::FreshOnion => {
                let remaining: Vec<&[u8]> = self.keys[position + 1..].iter().map(Vec::as_slice).collect();
                list.entries[victim] = onion_encrypt(&SimSealedBox, &Token::random(&mut rng), &remaining, &mut rng);
            }
            Attack::Duplicate => {
                let other = (victim + 1) % list.entries.len();
                list.entries[victim] = list.entries[other].clone();
            }
        }
    }
}

fn mix_parties(counts: &[usize], rng: &mut ChaCha20Rng) -> Vec<MixParty> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| MixParty {
            keys: SimSealedBox.generate(i as u32, rng),
            tokens: generate_tokens(c, rng),
        })
        .collect()
}

fn boxed_rngs(n: usize, seed: u64) -> Vec<Box<dyn RngCore + Send>> {
    (0..n)
        .map(|i| Box::new(ChaCha20Rng::seed_from_u64(seed * 64 + i as u64)) as Box<dyn RngCore + Send>)
        .collect()
}

fn permutation_index(order: &[usize]) -> usize {
    // Lehmer code
    let mut index = 0;
    for i in 0..order.len() {
        let smaller = order[i + 1..].iter().filter(|&&x| x < order[i]).count();
        index = index * (order.len() - i) + smaller;
    }
    index
}

fn mixnet_integrity() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let n_parties = 4;

    // every attack at every position; the attacker holds no tokens, so every
    // entry it touches belongs to an honest party
    let mut scenarios = 0;
    for at in 0..n_parties {
        for attack in [Attack::Drop, Attack::Garbage, Attack::FreshOnion, Attack::Duplicate] {
            for trial in 0..25 {
                let mut counts = vec![3; n_parties];
                counts[at] = 0;
                let parties = mix_parties(&counts, &mut rng);
                let keys: Vec<Vec<u8>> = parties.iter().map(|p| p.keys.public_key.clone()).collect();
                let tamper = Attacker {
                    at,
                    attack,
                    keys,
                    seed: rng.random(),
                };
                let mut rngs = boxed_rngs(n_parties, trial);
                let result = create_token_list(&SimSealedBox, &parties, &mut rngs, Some(&tamper));
                ensure(result.is_err(), format!("{attack:?} by mixer {at} went unnoticed"))?;
                scenarios += 1;
            }
        }
    }

    // output order of four single-token parties
    let parties = mix_parties(&[1; 4], &mut rng);
    let mut rngs = boxed_rngs(4, 99);
    let position: HashMap<Token, usize> = parties.iter().enumerate().map(|(i, p)| (p.tokens[0], i)).collect();
    let mut counts = vec![0u64; 24];
    for _ in 0..100_000 {
        let list = create_token_list(&SimSealedBox, &parties, &mut rngs, None).map_err(|e| e.to_string())?;
        let order: Vec<usize> = list.tokens().unwrap().iter().map(|t| position[t]).collect();
        counts[permutation_index(&order)] += 1;
    }
    let p = common::chi_square_uniform_p(&counts);
    ensure(p > 0.01, format!("permutation chi-square p = {p}"))?;

    // an observer that sees every mixer's permutation except one honest
    // mixer's, and guesses that mixer kept the tracked entry in place
    let n = 5;
    let honest = 2;
    let trials = 10_000u64;
    let parties = mix_parties(&[1; 5], &mut rng);
    let keys: Vec<&[u8]> = parties.iter().map(|p| p.keys.public_key.as_slice()).collect();
    let mut hits = 0;
    for _ in 0..trials {
        let mut list = TokenList::new(
            parties.iter().map(|p| onion_encrypt(&SimSealedBox, &p.tokens[0], &keys, &mut rng)).collect(),
            n,
        );
        let mut tracked = 0;
        for (layer, party) in parties.iter().enumerate() {
            let (next, perm) = mix_step_traced(&SimSealedBox, &list, &party.keys.secret_key, &mut rng).unwrap();
            if layer != honest {
                tracked = perm.iter().position(|&from| from == tracked).unwrap();
            }
            list = next;
        }
        if list.tokens().unwrap()[tracked] == parties[0].tokens[0] {
            hits += 1;
        }
    }
    let (lo, hi) = common::wilson_interval(hits, trials, 2.576);
    let chance = 1.0 / n as f64;
    ensure(lo <= chance && chance <= hi, format!("linking rate {} outside [{lo}, {hi}]", hits as f64 / trials as f64))?;
    Ok(format!(
        "{scenarios}/{scenarios} tampering runs detected, permutation p={p:.3}, linking {:.4} (chance {chance})",
        hits as f64 / trials as f64
    ))
}

// ---------------------------------------------------------------- 5

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn amplification_math() -> Check {
    let mut cases = 0;
    for n in 1..=12u64 {
        for successes in 0..=n {
            for draws in 0..=n {
                // count every draw-sized subset by its number of successes
                let mut hist = vec![0u64; n as usize + 1];
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as u64 == draws {
                        hist[(mask & ((1 << successes) - 1)).count_ones() as usize] += 1;
                    }
                }
                let total = binomial(n, draws) as f64;
                let h = Hypergeometric::new(n, successes, draws).unwrap();
                let mut cumulative = 0u64;
                for x in 0..=n {
                    cumulative += hist[x as usize];
                    let pmf = hist[x as usize] as f64 / total;
                    ensure((h.pmf(x) - pmf).abs() <= 1e-12, format!("pmf({n},{successes},{draws}) at {x}"))?;
                    ensure(
                        (h.cdf(x) - cumulative as f64 / total).abs() <= 1e-12,
                        format!("cdf({n},{successes},{draws}) at {x}"),
                    )?;
                }
                for tail in [0.314_159, 0.070_71, 0.013_37, 1.1e-3, 1.3e-6] {
                    let mut above = hist.iter().sum::<u64>();
                    let mut q = 0;
                    loop {
                        above -= hist[q];
                        if above as f64 / total <= tail {
                            break;
                        }
                        q += 1;
                    }
                    ensure(
                        h.upper_quantile(tail) == q as u64,
                        format!("quantile({n},{successes},{draws}, {tail})"),
                    )?;
                }
                cases += 1;
            }
        }
    }

    let (n, b) = (1000, 50);
    let slacks = [0.0, 1e-9, 1e-6, 1e-3];
    let advs = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9];
    let rows = amplification_curve(n, b, &slacks, &advs).unwrap();
    let gamma = b as f64 / n as f64;
    for r in &rows {
        ensure(r.poisson_frac == gamma, "Poisson fraction is not flat")?;
        let n_honest = (n as f64 * (1.0 - r.adv_frac)).round() as usize;
        let worst = b.min(n_honest) as f64 / n_honest as f64;
        if r.slack == 0.0 {
            ensure(r.swor_frac == worst, format!("slack-0 at adv {}", r.adv_frac))?;
        } else {
            ensure(
                r.swor_frac <= worst && r.swor_frac >= r.poisson_frac,
                format!("slack {} at adv {} not between Poisson and worst case", r.slack, r.adv_frac),
            )?;
        }
        if r.adv_frac > 0.0 {
            ensure(r.swor_frac >= r.poisson_frac, "SWOR below Poisson")?;
        }
    }
    Ok(format!("{cases} distributions match enumeration; {} curve points ordered", rows.len()))
}

// ---------------------------------------------------------------- 6

fn unit_vector(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn projection_sensitivity() -> Check {
    let got = solve_sensitivity(1, 1.0, 0.05);
    let oracle = common::oracle_sensitivity(1, 1.0, 0.05);
    ensure((got - 1.95996).abs() < 1e-4 && (got - oracle).abs() < 1e-4, format!("{got} vs {oracle}"))?;

    let (d, k, c, dp) = (32, 8, 1.0, 0.05);
    let bound = solve_sensitivity(k, c, dp);
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let a = unit_vector(d, &mut rng);
    let draws = 100_000u64;
    let norms: Vec<f64> = (0..draws)
        .map(|i| {
            let p = generate_projection(&ProjectionSpec::new(d, k, Seed::from_u64(i), c, dp).unwrap()).unwrap();
            p.project(&a).unwrap().iter().map(|x| x * x).sum::<f64>()
        })
        .collect();
    let rate = norms.iter().filter(|&&s| s.sqrt() <= bound).count() as f64 / draws as f64;
    let se = (dp * (1.0 - dp) / draws as f64).sqrt();
    ensure(rate >= 1.0 - dp - 3.0 * se, format!("coverage {rate}"))?;

    let gamma = Gamma::new(k as f64 / 2.0, k as f64 / (2.0 * c * c)).unwrap();
    let mut sample = norms[..10_000].to_vec();
    let (stat, p) = common::ks_test(&mut sample, |x| gamma.cdf(x));
    ensure(p > 0.01, format!("KS D = {stat}, p = {p}"))?;
    Ok(format!("C~ = {got:.6}, coverage {rate:.4}, KS p={p:.3}"))
}

// ---------------------------------------------------------------- 7

fn train_config(model: ModelKind, regime: Regime, b: usize, steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        model,
        frozen_features: None,
        regime,
        batch: BatchScheme::Swor { b },
        clip_norm: 1.0,
        neighbour: NeighbourRelation::RemoveAdd,
        privacy: PrivacyConfig {
            target_epsilon: regime.is_private().then_some(1.0),
            ..PrivacyConfig::default()
        },
        projection: None,
        learning_rate: lr,
        steps,
        eval_every: 0,
        trusted_noise: TrustedNoise::Central,
        record_trajectory: false,
    }
}

fn train(cfg: &TrainConfig, train: &Dataset, test: &Dataset, parties: usize, seed: u64) -> TrainReport {
    let partition = Partition::uniform(train.len(), parties).unwrap();
    run_training(cfg, train, Some(test), &partition, TrainOptions::new(Seed::from_u64(seed))).unwrap()
}

fn pipeline_equivalence() -> Check {
    let start = Instant::now();
    let data = gaussian_mixture(3000, 999, 2, 2.0, &Seed::from_u64(7));
    let (tr, te) = data.split(0.2, &Seed::from_u64(8));
    let model = ModelKind::LogisticRegression { features: 999, classes: 2 };
    let mut cfg = train_config(model, Regime::DpSmc, 200, 100, 0.5);
    cfg.record_trajectory = true;
    let dp = train(&cfg, &tr, &te, 10, 1);
    cfg.regime = Regime::Trusted;
    cfg.trusted_noise = TrustedNoise::PartyShares;
    let trusted = train(&cfg, &tr, &te, 10, 1);
    ensure(dp.parameters == 1000, format!("d = {}", dp.parameters))?;
    let quantum = 2f64.powi(-(FixedPointCodec::default().frac_bits() as i32 + 1));
    let mut worst_ratio = 0.0f64;
    for (t, (a, b)) in dp.trajectory.unwrap().iter().zip(trusted.trajectory.unwrap()).enumerate() {
        let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let allowed = (t + 1) as f64 * quantum;
        ensure(dev <= allowed, format!("step {t}: divergence {dev} > {allowed}"))?;
        worst_ratio = worst_ratio.max(dev / allowed);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("max divergence {worst_ratio:.2e} of the bound over 100 steps, {secs:.1}s"))
}

// ---------------------------------------------------------------- 8

fn regime_ordering() -> Check {
    let start = Instant::now();
    let regimes = [Regime::Nonprivate, Regime::Trusted, Regime::DpSmc, Regime::Ldp];
    let mut acc = [0.0; 4];
    let seeds = 5;
    for seed in 0..seeds {
        let data = gaussian_mixture(10000, 20, 4, 2.5, &Seed::from_u64(100 + seed));
        let (tr, te) = data.split(0.2, &Seed::from_u64(200 + seed));
        for (i, &regime) in regimes.iter().enumerate() {
            let cfg = train_config(ModelKind::LogisticRegression { features: 20, classes: 4 }, regime, 400, 100, 0.5);
            acc[i] += 100.0 * train(&cfg, &tr, &te, 10, seed).final_test_accuracy.unwrap() / seeds as f64;
        }
    }
    let [nonprivate, trusted, dp, ldp] = acc;
    let summary = format!("nonprivate {nonprivate:.2}, trusted {trusted:.2}, dp_smc {dp:.2}, ldp {ldp:.2}");
    ensure(nonprivate >= trusted.max(dp), format!("nonprivate below a private regime: {summary}"))?;
    ensure((trusted - dp).abs() < 1.0, format!("trusted/dp_smc gap too large: {summary}"))?;
    ensure(dp - ldp > 5.0, format!("dp_smc/ldp gap too small: {summary}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 600.0, format!("took {secs:.1}s"))?;
    Ok(format!("{summary} ({secs:.1}s)"))
}

// ---------------------------------------------------------------- 9

fn projection_utility() -> Check {
    let start = Instant::now();
    let model = ModelKind::LogisticRegression { features: 1000, classes: 10 };
    let d = model.param_count();
    let seeds = 3;
    let ks = [100, 400, 1000];
    let mut base = 0.0;
    let mut projected = [0.0; 3];
    let mut reductions = [0.0; 3];
    let mut epsilon = 0.0;
    for seed in 0..seeds {
        let data = gaussian_mixture(4000, 1000, 10, 20.0, &Seed::from_u64(300 + seed));
        let (tr, te) = data.split(0.2, &Seed::from_u64(400 + seed));
        let mut cfg = train_config(model.clone(), Regime::DpSmc, 400, 40, 0.5);
        cfg.privacy.target_epsilon = None;
        cfg.privacy.noise_multiplier = Some(10.0);
        let report = train(&cfg, &tr, &te, 10, seed);
        epsilon = report.epsilon.unwrap();
        base += 100.0 * report.final_test_accuracy.unwrap() / seeds as f64;
        for (i, &k) in ks.iter().enumerate() {
            let mut cfg = cfg.clone();
            cfg.projection = Some(ProjectionConfig {
                k,
                delta_prime: 1e-6,
                resample_per_step: true,
            });
            let report = train(&cfg, &tr, &te, 10, seed);
            projected[i] += 100.0 * report.final_test_accuracy.unwrap() / seeds as f64;
            reductions[i] = report.projection.unwrap().upload_reduction;
        }
    }
    let summary = format!(
        "unprojected {base:.2}; k=100 {:.2}, k=400 {:.2}, k=1000 {:.2}; upload reduction {:.1}/{:.1}/{:.1}",
        projected[0], projected[1], projected[2], reductions[0], reductions[1], reductions[2]
    );
    ensure(base - projected[1] <= 5.0, format!("k=400 too far below unprojected: {summary}"))?;
    ensure(projected.windows(2).all(|w| w[1] >= w[0]), format!("accuracy not monotone in k: {summary}"))?;
    for (r, k) in reductions.iter().zip(ks) {
        let ideal = d as f64 / k as f64;
        ensure((r / ideal - 1.0).abs() < 0.05, format!("reduction {r} vs d/k {ideal}"))?;
    }
    Ok(format!("{summary}; eps {epsilon:.2} ({:.1}s)", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 10

fn gradient_correctness() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for pair in 0..100 {
        let kind = match pair % 3 {
            0 => ModelKind::LogisticRegression {
                features: rng.random_range(1..16),
                classes: 2,
            },
            1 => ModelKind::LogisticRegression {
                features: rng.random_range(1..16),
                classes: rng.random_range(3..8),
            },
            _ => ModelKind::Mlp {
                features: rng.random_range(1..10),
                hidden: (0..rng.random_range(1..3)).map(|_| rng.random_range(1..10)).collect(),
                classes: rng.random_range(2..6),
            },
        };
        let mut model = Model::init(kind, None, &Seed::from_u64(pair)).unwrap();
        for t in &mut model.theta {
            *t = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..model.kind.features()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = rng.random_range(0..model.kind.classes() as u32);
        let mut g = vec![0.0; model.dim()];
        model.loss_and_grad(&x, y, &mut g);
        let h = 1e-5;
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..model.dim() {
            let mut m = model.clone();
            m.theta[i] += h;
            let up = m.loss(&x, y);
            m.theta[i] -= 2.0 * h;
            let fd = (up - m.loss(&x, y)) / (2.0 * h);
            err += (g[i] - fd) * (g[i] - fd);
            norm += fd * fd;
        }
        let rel = err.sqrt() / norm.sqrt().max(1e-8);
        ensure(rel <= 1e-6, format!("pair {pair}: relative error {rel}"))?;
        worst = worst.max(rel);
    }
    Ok(format!("worst relative error {worst:.2e} over 100 pairs"))
}

// ---------------------------------------------------------------- 11

fn timing_trends() -> Check {
    let seed = Seed::from_u64(11);
    // medians are compared with a 10% allowance for scheduler noise
    let slack = 0.9;
    let nodes: Vec<u32> = (2..=10).collect();
    let dca = dca_round_times(100, &nodes, 2000, 7, &seed).map_err(|e| e.to_string())?;
    let mut running = 0.0f64;
    for p in &dca {
        ensure(p.median_secs >= slack * running, format!("DCA time dropped at M = {}: {dca:?}", p.x))?;
        running = running.max(p.median_secs);
    }
    let fold = fold_increase(&dca);
    ensure(*fold.last().unwrap() > 1.0, format!("no growth in M: {fold:?}"))?;

    let pairwise = pairwise_mask_times(&[10, 20, 40, 80, 160], 5, 20_000, 9, &seed).map_err(|e| e.to_string())?;
    let times: Vec<f64> = pairwise.iter().map(|p| p.median_secs).collect();
    let spread = times.iter().copied().fold(0.0, f64::max) / times.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(spread < 2.0, format!("pairwise mask time varies {spread:.2}x across N: {times:?}"))?;
    Ok(format!(
        "DCA fold increase M=2..10: {:.2}x; pairwise mask time spread across N=10..160: {spread:.2}x",
        fold.last().unwrap()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("secure-sum exactness", secure_sum_exactness),
        ("mask uniformity", mask_uniformity),
        ("noise plan variance", noise_plan_variance),
        ("mixnet integrity", mixnet_integrity),
        ("amplification math", amplification_math),
        ("projection sensitivity", projection_sensitivity),
        ("pipeline equivalence", pipeline_equivalence),
        ("regime ordering", regime_ordering),
        ("projection utility", projection_utility),
        ("gradient correctness", gradient_correctness),
        ("timing trends", timing_trends),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {number:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {number:>2} {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
