//! Statistical oracles shared by the integration tests. Independent of the
//! crate's own numerics: distributions come from `statrs`.
#![allow(dead_code)]

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

/// p-value of Pearson's chi-square test of `counts` against equal cell
/// probabilities.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

/// Histogram of the top `bits` bits of `modulus_bits`-bit values.
pub fn top_bits_histogram(values: impl IntoIterator<Item = u64>, modulus_bits: u32, bits: u32) -> Vec<u64> {
    let mut counts = vec![0u64; 1 << bits];
    for v in values {
        counts[(v >> (modulus_bits - bits)) as usize] += 1;
    }
    counts
}

/// Two-sided one-sample Kolmogorov–Smirnov test against `cdf`; returns
/// `(D, p)` with the asymptotic Kolmogorov distribution.
pub fn ks_test(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_sf(lambda))
}

fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..200 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    (centre - half, centre + half)
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// χ²_k CDF by Simpson integration after substituting `x = u²`, which
/// removes the singularity at zero for `k = 1`.
pub fn chi_square_cdf_quadrature(k: usize, x: f64) -> f64 {
    let half = k as f64 / 2.0;
    let log_norm = half * 2f64.ln() + ln_gamma(half);
    let g = |u: f64| {
        if u == 0.0 {
            return if k == 1 { 2.0 * (-log_norm).exp() } else { 0.0 };
        }
        (2f64.ln() + (k as f64 - 1.0) * u.ln() - u * u / 2.0 - log_norm).exp()
    };
    let upper = x.sqrt();
    let n = 20_000;
    let h = upper / n as f64;
    let mut s = g(0.0) + g(upper);
    for i in 1..n {
        s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Smallest `C̃` with `P[(C²/k) χ²_k ≤ C̃²] ≥ 1 - δ'`, by bisection on the
/// quadrature CDF.
pub fn oracle_sensitivity(k: usize, c: f64, delta_prime: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, k as f64 + 40.0 * (k as f64).sqrt() + 60.0);
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if chi_square_cdf_quadrature(k, mid) < 1.0 - delta_prime {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    c * (hi / k as f64).sqrt()
}
