//! Per-phase wall-clock accounting.

use std::ops::AddAssign;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Seconds spent in each phase of a training round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub gradient: f64,
    pub mask: f64,
    pub transport: f64,
    pub aggregate: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.gradient + self.mask + self.transport + self.aggregate
    }
}

impl AddAssign for PhaseTimings {
    fn add_assign(&mut self, rhs: Self) {
        self.gradient += rhs.gradient;
        self.mask += rhs.mask;
        self.transport += rhs.transport;
        self.aggregate += rhs.aggregate;
    }
}

/// Runs `f` and returns its output with the elapsed seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}
