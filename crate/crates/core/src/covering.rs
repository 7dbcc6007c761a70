//! Monte Carlo simulation of the two-outcome random covering process.
//!
//! A class occupies a region of volume `N`. The first sample covers volume 1.
//! Each further sample lands entirely inside the covered region with
//! probability `V / N` (volume unchanged) or entirely outside it (volume grows
//! by one). The mean final volume estimates the effective number of samples.
//!
//! Trial `t` draws from ChaCha8 with key `seed_from_u64(rng_seed)` and stream
//! id `t`, so trials are independent of execution order. Trials run on the
//! rayon pool and are reduced in trial order, which makes the result
//! bit-identical for a fixed seed regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveringConfig {
    pub n_prototypes: f64,
    pub n_samples: u64,
    pub n_trials: u64,
    pub rng_seed: u64,
    /// Keep every trial's final volume in the result.
    #[serde(default)]
    pub record_trials: bool,
}

impl CoveringConfig {
    pub fn new(n_prototypes: f64, n_samples: u64, n_trials: u64, rng_seed: u64) -> Self {
        Self {
            n_prototypes,
            n_samples,
            n_trials,
            rng_seed,
            record_trials: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_prototypes.is_finite() || self.n_prototypes < 1.0 {
            return Err(domain(format!(
                "n_prototypes must be finite and >= 1, got {}",
                self.n_prototypes
            )));
        }
        if self.n_samples == 0 {
            return Err(domain("n_samples must be >= 1"));
        }
        if self.n_trials == 0 {
            return Err(domain("n_trials must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveringResult {
    pub mean_volume: f64,
    /// Sample standard deviation over trials divided by `sqrt(n_trials)`.
    pub std_error: f64,
    pub per_trial_volumes: Option<Vec<f64>>,
}

impl CoveringResult {
    /// `|mean - expected|` in units of the standard error. Zero when both the
    /// deviation and the standard error vanish.
    pub fn z_score(&self, expected: f64) -> f64 {
        let dev = (self.mean_volume - expected).abs();
        if dev == 0.0 {
            0.0
        } else {
            dev / self.std_error
        }
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Runs one trial and returns the volume after every sample.
pub fn trial_trajectory(n_prototypes: f64, n_samples: u64, seed: u64, trial: u64) -> Vec<u64> {
    let mut rng = trial_rng(seed, trial);
    let mut path = Vec::with_capacity(n_samples as usize);
    let mut volume = 1u64;
    path.push(volume);
    for _ in 1..n_samples {
        volume = step(volume, n_prototypes, &mut rng);
        path.push(volume);
    }
    path
}

#[inline]
fn step(volume: u64, n_prototypes: f64, rng: &mut ChaCha8Rng) -> u64 {
    // V can exceed a non-integer N by less than one; clamp keeps p a probability.
    let p_overlap = (volume as f64 / n_prototypes).min(1.0);
    if rng.random::<f64>() < p_overlap {
        volume
    } else {
        volume + 1
    }
}

fn run_trial(n_prototypes: f64, n_samples: u64, seed: u64, trial: u64) -> f64 {
    let mut rng = trial_rng(seed, trial);
    let mut volume = 1u64;
    for _ in 1..n_samples {
        volume = step(volume, n_prototypes, &mut rng);
    }
    volume as f64
}

pub fn simulate_covering(config: &CoveringConfig) -> Result<CoveringResult> {
    config.validate()?;
    let volumes: Vec<f64> = (0..config.n_trials)
        .into_par_iter()
        .map(|t| run_trial(config.n_prototypes, config.n_samples, config.rng_seed, t))
        .collect();

    let n = volumes.len() as f64;
    let mean = volumes.iter().sum::<f64>() / n;
    let std_error = if volumes.len() > 1 {
        let ss: f64 = volumes.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };

    Ok(CoveringResult {
        mean_volume: mean,
        std_error,
        per_trial_volumes: config.record_trials.then_some(volumes),
    })
}
