//! Joint batch selection and effective sampling fractions.
//!
//! With a shared token list and a jointly generated seed every party
//! derives the same SWOR batch locally. Poisson sampling needs no
//! coordination at all. When malicious parties know which of their own
//! samples are in a SWOR batch, the honest share of the batch is
//! hypergeometric and the amplification an honest sample enjoys is
//! governed by an upper quantile of that distribution.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keystream::{digest32, HashStream, Seed};
use crate::mixnet::Token;
use crate::stats::{ln_choose, normal_quantile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("batch size {b} exceeds the {n} available samples")]
    BatchTooLarge { b: usize, n: usize },
    #[error("sampling rate must lie in (0, 1), got {0}")]
    InvalidRate(f64),
    #[error("invalid amplification query: {0}")]
    InvalidQuery(String),
    #[error("party {0} revealed a seed contribution that does not match its commitment")]
    CommitmentMismatch(u32),
    #[error("seed contributions missing")]
    NoContributions,
    #[error("token list does not match the parties' tokens: {0}")]
    TokenMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchScheme {
    /// Sampling without replacement with fixed batch size.
    Swor { b: usize },
    /// Independent inclusion with probability `gamma`.
    Poisson { gamma: f64 },
}

impl BatchScheme {
    pub fn validate(&self, n: usize) -> Result<(), SamplingError> {
        match *self {
            BatchScheme::Swor { b } if b > n => Err(SamplingError::BatchTooLarge { b, n }),
            BatchScheme::Swor { .. } => Ok(()),
            BatchScheme::Poisson { gamma } if !(gamma > 0.0 && gamma < 1.0) => {
                Err(SamplingError::InvalidRate(gamma))
            }
            BatchScheme::Poisson { .. } => Ok(()),
        }
    }

    /// `b/n` or `γ`.
    pub fn sampling_fraction(&self, n: usize) -> f64 {
        match *self {
            BatchScheme::Swor { b } => b as f64 / n as f64,
            BatchScheme::Poisson { gamma } => gamma,
        }
    }

    /// Normalizer of the noisy sum: the fixed `b` for SWOR, the expected
    /// size `γn` for Poisson.
    pub fn normalizer(&self, n: usize) -> f64 {
        match *self {
            BatchScheme::Swor { b } => b as f64,
            BatchScheme::Poisson { gamma } => gamma * n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub scheme: BatchScheme,
    pub joint_seed: Seed,
    pub round: u64,
}

/// A party's seed contribution for commit-then-reveal generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedContribution {
    pub party: u32,
    pub value: [u8; 32],
}

impl SeedContribution {
    pub fn random<R: Rng + ?Sized>(party: u32, rng: &mut R) -> Self {
        let mut value = [0u8; 32];
        rng.fill_bytes(&mut value);
        Self { party, value }
    }

    pub fn commitment(&self) -> [u8; 32] {
        digest32(&[b"dpsmc/seed-commit", &self.party.to_le_bytes(), &self.value])
    }
}

/// XOR of all revealed contributions, after checking each against the
/// commitment its party published first.
pub fn combine_seed(
    commitments: &HashMap<u32, [u8; 32]>,
    reveals: &[SeedContribution],
) -> Result<Seed, SamplingError> {
    if reveals.is_empty() || reveals.len() != commitments.len() {
        return Err(SamplingError::NoContributions);
    }
    let mut seed = Seed([0u8; 32]);
    for r in reveals {
        match commitments.get(&r.party) {
            Some(c) if *c == r.commitment() => seed = seed.xor(&Seed(r.value)),
            _ => return Err(SamplingError::CommitmentMismatch(r.party)),
        }
    }
    Ok(seed)
}

/// Positions of the batch in the shared list: the first `b` entries of a
/// Fisher–Yates shuffle driven by `BLAKE2b(joint_seed ‖ round ‖ i)`.
pub fn swor_positions(n: usize, b: usize, joint_seed: &Seed, round: u64) -> Result<Vec<usize>, SamplingError> {
    if b > n {
        return Err(SamplingError::BatchTooLarge { b, n });
    }
    let mut stream = HashStream::new(*joint_seed, round);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = i + stream.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(b);
    Ok(idx)
}

/// The batch's tokens, selected from the plaintext list every party holds.
pub fn select_batch_swor(tokens: &[Token], spec: &BatchSpec) -> Result<Vec<Token>, SamplingError> {
    let BatchScheme::Swor { b } = spec.scheme else {
        return Err(SamplingError::InvalidQuery("select_batch_swor needs a SWOR scheme".into()));
    };
    Ok(swor_positions(tokens.len(), b, &spec.joint_seed, spec.round)?
        .into_iter()
        .map(|p| tokens[p])
        .collect())
}

/// Local indices included independently with probability `gamma`.
pub fn select_batch_poisson<R: Rng + ?Sized>(
    local_count: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<usize>, SamplingError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(SamplingError::InvalidRate(gamma));
    }
    Ok((0..local_count).filter(|_| rng.random::<f64>() < gamma).collect())
}

/// Deterministic per-party sample tokens; a party's tokens depend only on
/// its own seed.
pub fn party_tokens(seed: &Seed, count: usize) -> Vec<Token> {
    let mut rng = seed.rng();
    (0..count).map(|_| Token::random(&mut rng)).collect()
}

/// The shared token list plus each party's private map from its own tokens
/// to local sample indices.
#[derive(Debug, Clone)]
pub struct TokenIndex {
    list: Vec<Token>,
    owned: Vec<HashMap<Token, usize>>,
}

impl TokenIndex {
    /// Fails unless every party finds all of its tokens in `list` and the
    /// list holds nothing else.
    pub fn new(list: Vec<Token>, party_tokens: &[Vec<Token>]) -> Result<Self, SamplingError> {
        let total: usize = party_tokens.iter().map(Vec::len).sum();
        if total != list.len() {
            return Err(SamplingError::TokenMismatch(format!(
                "list holds {} tokens, parties own {total}",
                list.len()
            )));
        }
        let present: HashSet<&Token> = list.iter().collect();
        let owned = party_tokens
            .iter()
            .enumerate()
            .map(|(p, tokens)| {
                if let Some(missing) = tokens.iter().position(|t| !present.contains(t)) {
                    return Err(SamplingError::TokenMismatch(format!(
                        "token {missing} of party {p} is missing from the list"
                    )));
                }
                Ok(tokens.iter().enumerate().map(|(i, t)| (*t, i)).collect())
            })
            .collect::<Result<Vec<HashMap<_, _>>, _>>()?;
        Ok(Self { list, owned })
    }

    /// Tokens from [`party_tokens`] in a seeded random order: the list a
    /// mixnet run produces, without running one.
    pub fn simulated(counts: &[usize], seed: &Seed) -> Self {
        let tokens: Vec<Vec<Token>> = counts
            .iter()
            .enumerate()
            .map(|(p, &c)| party_tokens(&seed.derive("party-tokens", &[p as u64]), c))
            .collect();
        let mut list: Vec<Token> = tokens.concat();
        list.shuffle(&mut seed.derive("list-order", &[]).rng());
        Self::new(list, &tokens).expect("consistent by construction")
    }

    pub fn list(&self) -> &[Token] {
        &self.list
    }

    pub fn parties(&self) -> usize {
        self.owned.len()
    }

    /// Local indices of `party`'s samples among the batch positions.
    pub fn local_batch(&self, party: usize, positions: &[usize]) -> Vec<usize> {
        positions
            .iter()
            .filter_map(|&p| self.owned[party].get(&self.list[p]).copied())
            .collect()
    }
}

/// Hypergeometric distribution: `draws` from a population of `population`
/// containing `successes` marked items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hypergeometric {
    pub population: u64,
    pub successes: u64,
    pub draws: u64,
}

/// Above this population size quantiles use a normal approximation.
pub const EXACT_QUANTILE_LIMIT: u64 = 1_000_000;

impl Hypergeometric {
    pub fn new(population: u64, successes: u64, draws: u64) -> Result<Self, SamplingError> {
        if successes > population || draws > population {
            return Err(SamplingError::InvalidQuery(format!(
                "hypergeometric({population}, {successes}, {draws}) is ill-formed"
            )));
        }
        Ok(Self {
            population,
            successes,
            draws,
        })
    }

    pub fn support(&self) -> (u64, u64) {
        let failures = self.population - self.successes;
        (self.draws.saturating_sub(failures), self.draws.min(self.successes))
    }

    pub fn ln_pmf(&self, x: u64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return f64::NEG_INFINITY;
        }
        ln_choose(self.successes, x) + ln_choose(self.population - self.successes, self.draws - x)
            - ln_choose(self.population, self.draws)
    }

    pub fn pmf(&self, x: u64) -> f64 {
        self.ln_pmf(x).exp()
    }

    /// `P[X ≤ x]`, summing whichever tail is shorter.
    pub fn cdf(&self, x: u64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        if x - lo <= hi - x {
            log_sum_exp((lo..=x).map(|k| self.ln_pmf(k))).exp().min(1.0)
        } else {
            (1.0 - self.sf(x)).max(0.0)
        }
    }

    /// `P[X > x]`.
    pub fn sf(&self, x: u64) -> f64 {
        let (_, hi) = self.support();
        if x >= hi {
            return 0.0;
        }
        log_sum_exp((x + 1..=hi).map(|k| self.ln_pmf(k))).exp().min(1.0)
    }

    /// Smallest `q` with `P[X > q] ≤ tail`, i.e. `P[X ≤ q] ≥ 1 - tail`.
    pub fn upper_quantile(&self, tail: f64) -> u64 {
        let (lo, hi) = self.support();
        if tail <= 0.0 {
            return hi;
        }
        if self.population > EXACT_QUANTILE_LIMIT {
            return self.normal_upper_quantile(tail);
        }
        // Walk down from the top, accumulating the upper tail in log space.
        let ln_tail = tail.ln();
        let mut acc = f64::NEG_INFINITY;
        let mut q = hi;
        while q > lo {
            let next = log_add(acc, self.ln_pmf(q));
            if next > ln_tail {
                break;
            }
            acc = next;
            q -= 1;
        }
        q
    }

    fn normal_upper_quantile(&self, tail: f64) -> u64 {
        let (lo, hi) = self.support();
        let (n, k, b) = (self.population as f64, self.successes as f64, self.draws as f64);
        let mean = b * k / n;
        let var = b * (k / n) * (1.0 - k / n) * (n - b) / (n - 1.0);
        if var <= 0.0 || tail >= 1.0 {
            return (mean.round() as u64).clamp(lo, hi);
        }
        // continuity correction: P[X ≤ q] ≈ Φ((q + 0.5 - mean) / sd)
        let q = (mean + var.sqrt() * normal_quantile(1.0 - tail) - 0.5).ceil();
        (q.max(0.0) as u64).clamp(lo, hi)
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationQuery {
    pub n: usize,
    pub n_honest: usize,
    pub b: usize,
    pub delta_slack: f64,
}

/// Worst-case SWOR sampling fraction for an honest sample. With zero slack
/// the whole batch may be honest (`b / n_honest`, capped at 1); with slack
/// `δ'` the honest count is bounded by its `1 - δ'` quantile.
pub fn effective_fraction_swor(q: &AmplificationQuery) -> Result<f64, SamplingError> {
    if q.n_honest == 0 || q.n_honest > q.n {
        return Err(SamplingError::InvalidQuery(format!(
            "need 0 < n_honest <= n, got n_honest = {}, n = {}",
            q.n_honest, q.n
        )));
    }
    if q.b > q.n {
        return Err(SamplingError::BatchTooLarge { b: q.b, n: q.n });
    }
    if !(q.delta_slack >= 0.0) {
        return Err(SamplingError::InvalidQuery("slack must be non-negative".into()));
    }
    let honest = q.n_honest as f64;
    if q.delta_slack == 0.0 {
        return Ok(q.b.min(q.n_honest) as f64 / honest);
    }
    let dist = Hypergeometric::new(q.n as u64, q.n_honest as u64, q.b as u64)?;
    Ok(dist.upper_quantile(q.delta_slack) as f64 / honest)
}

/// Poisson sampling: each honest sample's inclusion probability is `γ`
/// no matter what the malicious parties know.
pub fn effective_fraction_poisson(gamma: f64) -> Result<f64, SamplingError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(SamplingError::InvalidRate(gamma));
    }
    Ok(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationRow {
    pub adv_frac: f64,
    pub slack: f64,
    pub swor_frac: f64,
    pub poisson_frac: f64,
}

/// Grid of effective fractions over adversary-held data fractions and
/// slacks, with Poisson at the matched rate `γ = b/n`.
pub fn amplification_curve(
    n: usize,
    b: usize,
    delta_slacks: &[f64],
    adversary_fractions: &[f64],
) -> Result<Vec<AmplificationRow>, SamplingError> {
    if delta_slacks.is_empty() || adversary_fractions.is_empty() {
        return Err(SamplingError::InvalidQuery("grids must be non-empty".into()));
    }
    if b == 0 || b >= n {
        return Err(SamplingError::InvalidQuery(format!("need 0 < b < n, got b = {b}, n = {n}")));
    }
    let gamma = b as f64 / n as f64;
    let poisson = effective_fraction_poisson(gamma)?;
    let mut rows = Vec::with_capacity(delta_slacks.len() * adversary_fractions.len());
    for &adv in adversary_fractions {
        if !(0.0..1.0).contains(&adv) {
            return Err(SamplingError::InvalidQuery(format!("adversary fraction {adv} not in [0, 1)")));
        }
        let n_honest = ((n as f64) * (1.0 - adv)).round().max(1.0) as usize;
        for &slack in delta_slacks {
            let swor = effective_fraction_swor(&AmplificationQuery {
                n,
                n_honest,
                b,
                delta_slack: slack,
            })?;
            rows.push(AmplificationRow {
                adv_frac: adv,
                slack,
                swor_frac: swor,
                poisson_frac: poisson,
            });
        }
    }
    Ok(rows)
}

pub const AMPLIFICATION_CSV_HEADER: &str = "adv_frac,slack,swor_frac,poisson_frac";

pub fn amplification_csv(rows: &[AmplificationRow]) -> String {
    let mut out = String::from(AMPLIFICATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{}", r.adv_frac, r.slack, r.swor_frac, r.poisson_frac).unwrap();
    }
    out
}
