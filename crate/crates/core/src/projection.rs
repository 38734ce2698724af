//! DP random projection of clipped gradient sums.
//!
//! Every party regenerates the same `d × k` Gaussian matrix `P` from a shared
//! seed, uploads `Pᵀ Σ z` instead of `Σ z`, and the master maps the noisy
//! `k`-vector back with `P`. The noise is calibrated to `C̃`, a bound on
//! `‖Pᵀa‖₂` that holds for `‖a‖₂ ≤ C` except with probability `δ'`.

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keystream::Seed;
use crate::stats::{gamma_q, normal_quantile, unit_open};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionError { expected: usize, found: usize },
    #[error("gradient {index} has norm {norm} above the clipping bound {clip}")]
    ClipViolation { index: usize, norm: f64, clip: f64 },
    #[error("invalid projection spec: {0}")]
    InvalidSpec(String),
}

pub const DEFAULT_DELTA_PRIME: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub d: usize,
    pub k: usize,
    pub seed: Seed,
    pub clip_norm: f64,
    pub proj_sensitivity: f64,
    pub delta_prime: f64,
}

impl ProjectionSpec {
    /// Builds a spec with `C̃` solved from `(k, C, δ')`.
    pub fn new(d: usize, k: usize, seed: Seed, clip_norm: f64, delta_prime: f64) -> Result<Self, ProjectionError> {
        let spec = Self {
            d,
            k,
            seed,
            clip_norm,
            proj_sensitivity: solve_sensitivity(k.max(1), clip_norm.max(0.0), delta_prime.clamp(1e-300, 0.5)),
            delta_prime,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        let bad = |m: String| Err(ProjectionError::InvalidSpec(m));
        if self.k == 0 || self.k > self.d {
            return bad(format!("need 1 <= k <= d, got k = {}, d = {}", self.k, self.d));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clipping norm must be positive, got {}", self.clip_norm));
        }
        if !(self.delta_prime > 0.0 && self.delta_prime < 1.0) {
            return bad(format!("delta' must lie in (0, 1), got {}", self.delta_prime));
        }
        let a = self.k as f64 / 2.0;
        let x = self.proj_sensitivity.powi(2) * self.k as f64 / (2.0 * self.clip_norm.powi(2));
        // small allowance for rounding in the stored value
        if gamma_q(a, x) > self.delta_prime * (1.0 + 1e-6) {
            return bad(format!(
                "C~ = {} does not bound the projection with probability 1 - {}",
                self.proj_sensitivity, self.delta_prime
            ));
        }
        Ok(())
    }

    /// The spec whose seed drives step `round`'s matrix.
    pub fn for_round(&self, round: u64) -> Self {
        Self {
            seed: self.seed.derive("projection-round", &[round]),
            ..*self
        }
    }
}

/// Smallest `C̃` with `P[Γ(k/2, 2C²/k) ≤ C̃²] ≥ 1 - δ'`, i.e.
/// `C̃² = C²/k · χ²_k(1 - δ')`.
pub fn solve_sensitivity(k: usize, clip_norm: f64, delta_prime: f64) -> f64 {
    assert!(k >= 1, "k must be positive");
    assert!(clip_norm >= 0.0, "clipping norm must be non-negative");
    assert!(delta_prime > 0.0 && delta_prime < 1.0, "delta' must lie in (0, 1)");
    if clip_norm == 0.0 {
        return 0.0;
    }
    let q = chi_square_upper_quantile(k, delta_prime);
    clip_norm * (q / k as f64).sqrt()
}

/// `x` with `P[χ²_k > x] = tail`, by bisection on the regularized gamma.
pub fn chi_square_upper_quantile(k: usize, tail: f64) -> f64 {
    let a = k as f64 / 2.0;
    let sf = |x: f64| gamma_q(a, x / 2.0);
    let mut lo = 0.0;
    let mut hi = k as f64 + 10.0;
    while sf(hi) > tail {
        lo = hi;
        hi *= 2.0;
    }
    // sf is decreasing; keep sf(lo) > tail >= sf(hi)
    while hi - lo > 1e-14 * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sf(mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Dense `d × k` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    d: usize,
    k: usize,
    data: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn from_rows(d: usize, k: usize, data: Vec<f64>) -> Result<Self, ProjectionError> {
        if data.len() != d * k {
            return Err(ProjectionError::DimensionError {
                expected: d * k,
                found: data.len(),
            });
        }
        Ok(Self { d, k, data })
    }

    /// `d × d` identity, for plumbing tests.
    pub fn identity(d: usize) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Self { d, k: d, data }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// `Pᵀ v` for `v ∈ ℝ^d`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        if v.len() != self.d {
            return Err(ProjectionError::DimensionError {
                expected: self.d,
                found: v.len(),
            });
        }
        let mut out = vec![0.0; self.k];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.row(i)) {
                *o += vi * p;
            }
        }
        Ok(out)
    }

    /// `P w` for `w ∈ ℝ^k`.
    pub fn lift(&self, w: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        if w.len() != self.k {
            return Err(ProjectionError::DimensionError {
                expected: self.k,
                found: w.len(),
            });
        }
        Ok(self
            .data
            .par_chunks(self.k)
            .map(|row| row.iter().zip(w).map(|(p, x)| p * x).sum())
            .collect())
    }
}

const ROWS_PER_BLOCK: usize = 64;

/// Entries i.i.d. `N(0, 1/k)`: ChaCha20 keyed by the spec seed, each 64-bit
/// word mapped to `(0, 1)` and through the normal quantile. Entry `(i, j)`
/// always consumes word `i·k + j`, so blocks of rows are generated in
/// parallel without changing the result.
pub fn generate_projection(spec: &ProjectionSpec) -> Result<ProjectionMatrix, ProjectionError> {
    if spec.k == 0 || spec.k > spec.d {
        return Err(ProjectionError::DimensionError {
            expected: spec.d,
            found: spec.k,
        });
    }
    let (d, k) = (spec.d, spec.k);
    let scale = 1.0 / (k as f64).sqrt();
    let base = spec.seed.rng();
    let mut data = vec![0.0; d * k];
    data.par_chunks_mut(ROWS_PER_BLOCK * k)
        .enumerate()
        .for_each(|(block, chunk)| {
            let mut rng: ChaCha20Rng = base.clone();
            // word position counts 32-bit words
            rng.set_word_pos(2 * (block * ROWS_PER_BLOCK * k) as u128);
            for x in chunk.iter_mut() {
                *x = normal_quantile(unit_open(rng.next_u64())) * scale;
            }
        });
    Ok(ProjectionMatrix { d, k, data })
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Σ Pᵀ z` over clipped gradients, computed as `Pᵀ Σ z`.
pub fn project_and_sum<'a>(
    gradients: impl IntoIterator<Item = &'a [f64]>,
    p: &ProjectionMatrix,
    clip_norm: f64,
) -> Result<Vec<f64>, ProjectionError> {
    let mut total = vec![0.0; p.d];
    for (index, g) in gradients.into_iter().enumerate() {
        if g.len() != p.d {
            return Err(ProjectionError::DimensionError {
                expected: p.d,
                found: g.len(),
            });
        }
        let norm = l2_norm(g);
        if norm > clip_norm * (1.0 + 1e-9) {
            return Err(ProjectionError::ClipViolation {
                index,
                norm,
                clip: clip_norm,
            });
        }
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    p.project(&total)
}

/// `P · z̃`, the master's estimate of the unprojected noisy sum.
pub fn reconstruct(noisy_projection: &[f64], p: &ProjectionMatrix) -> Result<Vec<f64>, ProjectionError> {
    p.lift(noisy_projection)
}
