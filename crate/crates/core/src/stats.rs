//! Streaming mean / standard-error accumulators for Monte-Carlo drivers.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // float methods come from `Float` only without std
use num_traits::Float;

/// Welford accumulator; `merge` uses the pairwise update so partial results
/// from independent path batches combine exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let w = other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * self.n as f64 * w;
        self.mean += delta * w;
        self.n = n;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// One accumulator per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsTrace {
    pub points: Vec<RunningStats>,
}

impl StatsTrace {
    pub fn new(len: usize) -> Self {
        StatsTrace {
            points: vec![RunningStats::new(); len],
        }
    }

    pub fn push_path(&mut self, values: &[f64]) {
        for (acc, &v) in self.points.iter_mut().zip(values) {
            acc.push(v);
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(RunningStats::mean).collect()
    }

    pub fn stderrs(&self) -> Vec<f64> {
        self.points.iter().map(RunningStats::stderr).collect()
    }
}

/// Summary of a scalar Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl From<&RunningStats> for Estimate {
    fn from(s: &RunningStats) -> Self {
        Estimate {
            mean: s.mean(),
            stderr: s.stderr(),
            n: s.n,
        }
    }
}
