//! Timing sweeps for the two summation protocols. Absolute numbers depend
//! on the machine; only the trends are meaningful.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fixedpoint::{FixedPointCodec, FixedVector};
use crate::keystream::Seed;
use crate::securesum::{ClientProtocol, InProcessSummation, ProtocolConfig, SecureSumError, SecureSummation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    /// Swept parameter: `M` for DCA, `N` for pairwise.
    pub x: usize,
    pub median_secs: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn random_inputs(codec: FixedPointCodec, parties: usize, dim: usize, seed: &Seed) -> Vec<FixedVector> {
    let mut rng = seed.derive("bench-inputs", &[]).rng();
    (0..parties)
        .map(|_| FixedVector::from_words_reduced(codec, (0..dim).map(|_| rng.random::<u64>())))
        .collect()
}

/// Median wall time of one full DCA round for each node count in `nodes`.
pub fn dca_round_times(
    parties: usize,
    nodes: &[u32],
    dim: usize,
    reps: usize,
    seed: &Seed,
) -> Result<Vec<TimingPoint>, SecureSumError> {
    let codec = FixedPointCodec::default();
    let ids: Vec<u32> = (0..parties as u32).collect();
    let inputs = random_inputs(codec, parties, dim, seed);
    nodes
        .iter()
        .map(|&m| {
            let protocol = ProtocolConfig::Dca {
                nodes: m,
                subsets: Default::default(),
            };
            let mut sum = InProcessSummation::new(&protocol, &ids, seed, codec)?;
            sum.sum_round(0, &inputs)?;
            let mut times = Vec::with_capacity(reps);
            for round in 1..=reps as u64 {
                let start = Instant::now();
                sum.sum_round(round, &inputs)?;
                times.push(start.elapsed().as_secs_f64());
            }
            Ok(TimingPoint {
                x: m as usize,
                median_secs: median(times),
            })
        })
        .collect()
}

/// Median per-round mask generation time of one pairwise client, for each
/// roster size in `parties`, with masks within groups of `group_size`.
pub fn pairwise_mask_times(
    parties: &[usize],
    group_size: usize,
    dim: usize,
    reps: usize,
    seed: &Seed,
) -> Result<Vec<TimingPoint>, SecureSumError> {
    let codec = FixedPointCodec::default();
    let protocol = ProtocolConfig::Pairwise {
        group_size: Some(group_size),
    };
    let input = random_inputs(codec, 1, dim, seed).remove(0);
    parties
        .iter()
        .map(|&n| {
            let ids: Vec<u32> = (0..n as u32).collect();
            let (clients, _) = ClientProtocol::for_roster(&protocol, &ids, seed)?;
            let client = &clients[0];
            client.client_messages(0, &input)?;
            let mut times = Vec::with_capacity(reps);
            for round in 1..=reps as u64 {
                let start = Instant::now();
                client.client_messages(round, &input)?;
                times.push(start.elapsed().as_secs_f64());
            }
            Ok(TimingPoint {
                x: n,
                median_secs: median(times),
            })
        })
        .collect()
}

/// Total time relative to the first point.
pub fn fold_increase(points: &[TimingPoint]) -> Vec<f64> {
    let base = points.first().map_or(1.0, |p| p.median_secs);
    points.iter().map(|p| p.median_secs / base).collect()
}
