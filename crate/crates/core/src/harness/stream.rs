//! Synthetic tensor streams with outlier channels and dynamic-range drift.
//!
//! Rows are channels. A fixed random subset of rows is scaled by
//! `outlier_magnitude * drift^step`, so with `drift > 1` the gap between the
//! outlier rows and the rest widens every step. Each step draws from its own
//! ChaCha stream, so any step can be generated independently of the others.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaseDistribution {
    /// Zero-mean normal.
    Gaussian { sigma: f64 },
    /// `exp(N(mu, sigma))` with a random sign.
    Lognormal { mu: f64, sigma: f64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorStreamSpec {
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    pub steps: u64,
    pub base_distribution: BaseDistribution,
    #[serde(default)]
    pub outlier_channel_fraction: f64,
    #[serde(default = "one")]
    pub outlier_magnitude: f64,
    #[serde(default = "one")]
    pub drift: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TensorStreamSpec {
    pub fn gaussian(rows: usize, cols: usize, steps: u64, seed: u64) -> Self {
        Self {
            shape: [rows, cols],
            steps,
            base_distribution: BaseDistribution::Gaussian { sigma: 1.0 },
            outlier_channel_fraction: 0.0,
            outlier_magnitude: 1.0,
            drift: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        let [r, c] = self.shape;
        if r == 0 || c == 0 {
            return bad("shape must be nonempty");
        }
        if !(0.0..=1.0).contains(&self.outlier_channel_fraction) {
            return bad("outlier_channel_fraction must lie in [0, 1]");
        }
        if !(self.outlier_magnitude.is_finite() && self.outlier_magnitude > 0.0) {
            return bad("outlier_magnitude must be positive and finite");
        }
        if !(self.drift.is_finite() && self.drift > 0.0) {
            return bad("drift must be positive and finite");
        }
        let ok = match self.base_distribution {
            BaseDistribution::Gaussian { sigma } => sigma.is_finite() && sigma > 0.0,
            BaseDistribution::Lognormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma > 0.0,
        };
        if !ok {
            return bad("distribution parameters must be finite with sigma > 0");
        }
        Ok(())
    }

    /// Sorted outlier row indices, the same for every step.
    pub fn outlier_channels(&self) -> Vec<usize> {
        let rows = self.shape[0];
        let n = ((self.outlier_channel_fraction * rows as f64).round() as usize).min(rows);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let mut idx = sample(&mut rng, rows, n).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Multiplier applied to outlier rows at `step`.
    pub fn outlier_gain(&self, step: u64) -> f64 {
        self.outlier_magnitude * self.drift.powf(step as f64)
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// The tensor at one step, given the precomputed outlier rows.
fn draw(spec: &TensorStreamSpec, outliers: &[usize], step: u64) -> Result<TensorF32, HarnessError> {
    let [rows, cols] = spec.shape;
    let mut rng = step_rng(spec.seed, step);
    let mut vals: Vec<f64> = match spec.base_distribution {
        BaseDistribution::Gaussian { sigma } => {
            let d = Normal::new(0.0, sigma).expect("validated");
            (0..rows * cols).map(|_| d.sample(&mut rng)).collect()
        }
        BaseDistribution::Lognormal { mu, sigma } => {
            let d = LogNormal::new(mu, sigma).expect("validated");
            (0..rows * cols)
                .map(|_| {
                    let v = d.sample(&mut rng);
                    if rng.random::<bool>() {
                        -v
                    } else {
                        v
                    }
                })
                .collect()
        }
    };
    let gain = spec.outlier_gain(step);
    for &r in outliers {
        for v in &mut vals[r * cols..(r + 1) * cols] {
            *v *= gain;
        }
    }
    let vals = vals.into_iter().map(|v| v as f32).collect();
    TensorF32::new(rows, cols, vals).map_err(|e| HarnessError::InvalidConfig(format!("step {step}: {e}")))
}

pub fn generate_step(spec: &TensorStreamSpec, step: u64) -> Result<TensorF32, HarnessError> {
    spec.validate()?;
    draw(spec, &spec.outlier_channels(), step)
}

/// All `spec.steps` tensors in order.
pub fn generate_stream(spec: &TensorStreamSpec) -> Result<Vec<TensorF32>, HarnessError> {
    spec.validate()?;
    let outliers = spec.outlier_channels();
    (0..spec.steps).into_par_iter().map(|s| draw(spec, &outliers, s)).collect()
}

/// Generate a subrange of steps without materializing the rest.
pub(crate) fn generate_range(
    spec: &TensorStreamSpec,
    outliers: &[usize],
    steps: std::ops::Range<u64>,
) -> Result<Vec<TensorF32>, HarnessError> {
    steps.into_par_iter().map(|s| draw(spec, outliers, s)).collect()
}
