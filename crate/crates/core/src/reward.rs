//! Validity / complexity / coverage-novelty reward for the fuzzing loop.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::ir::Program;

/// `1 +` the number of loop headers and conditionals.
pub fn cyclomatic_complexity(program: &Program) -> u32 {
    program.cyclomatic_complexity()
}

/// Streaming per-branch population variance of hit counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageStats {
    pub n: u64,
    pub mean: Array1<f64>,
    pub m2: Array1<f64>,
    pub prev_var: Array1<f64>,
}

impl CoverageStats {
    pub fn new(branches: usize) -> Self {
        CoverageStats {
            n: 0,
            mean: Array1::zeros(branches),
            m2: Array1::zeros(branches),
            prev_var: Array1::zeros(branches),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self) -> Array1<f64> {
        if self.n == 0 {
            Array1::zeros(self.len())
        } else {
            &self.m2 / self.n as f64
        }
    }

    /// Welford update; returns `(var_t, var_{t-1})`.
    pub fn update_variance(&mut self, counts: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if counts.len() != self.len() {
            return Err(Error::shape("update_variance", self.len(), counts.len()));
        }
        let before = self.variance();
        self.n += 1;
        let n = self.n as f64;
        for ((b, mean), m2) in counts.iter().zip(self.mean.iter_mut()).zip(self.m2.iter_mut()) {
            let delta = b - *mean;
            *mean += delta / n;
            *m2 += delta * (b - *mean);
        }
        self.prev_var = before.clone();
        Ok((self.variance(), before))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardInputs {
    pub valid: bool,
    pub cc: u32,
    pub cc_max: u32,
    pub branch_counts: Array1<f64>,
}

/// Updates the statistics with this round's counts and scores the case.
///
/// Invalid cases still enter the variance stream so that every round
/// advances the same statistics.
pub fn compute_reward(inputs: &RewardInputs, stats: &mut CoverageStats) -> Result<f64> {
    if inputs.cc_max == 0 {
        return Err(Error::InvalidArgument("cc_max must be at least 1".into()));
    }
    let (now, before) = stats.update_variance(inputs.branch_counts.view())?;
    if !inputs.valid {
        return Ok(-1.0);
    }
    let novelty = now
        .iter()
        .zip(before.iter())
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max);
    let novelty = if novelty.is_finite() { novelty.abs() } else { 0.0 };
    Ok(1.0 + inputs.cc as f64 / inputs.cc_max as f64 + novelty)
}
