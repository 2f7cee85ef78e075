//! Analytic stand-in for the inner learner. Its validation error is a
//! quadratic bowl in σ around a known optimum plus a gap that closes as
//! epochs accumulate and a little Gaussian noise, so the outer loop can be
//! exercised in milliseconds against a known answer.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::heatmap::SigmaVector;
use crate::laoml::{EpochStats, InnerModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub optimum: f64,
    pub curvature: f64,
    pub floor: f64,
    /// Extra error of an untrained model; shrinks by `decay` per epoch.
    pub gap: f64,
    pub decay: f64,
    /// Standard deviation of the per-epoch validation noise.
    pub noise: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            optimum: 7.0,
            curvature: 0.1,
            floor: 1.0,
            gap: 2.0,
            decay: 0.9,
            noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    landmarks: usize,
    params: SurrogateParams,
    epochs: usize,
}

impl Surrogate {
    pub fn new(landmarks: usize, params: SurrogateParams) -> Self {
        Self {
            landmarks,
            params,
            epochs: 0,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Noise-free validation error at `sigma` after the epochs trained so far.
    pub fn expected_error(&self, sigma: f64) -> f64 {
        let p = &self.params;
        let d = sigma - p.optimum;
        p.floor + p.curvature * d * d + p.gap * p.decay.powi(self.epochs as i32)
    }
}

impl InnerModel for Surrogate {
    fn landmarks(&self) -> usize {
        self.landmarks
    }

    fn train_epoch(&mut self, sigmas: &SigmaVector, rng: &mut ChaCha8Rng) -> Result<EpochStats> {
        self.epochs += 1;
        let p = self.params;
        let progress = p.decay.powi(self.epochs as i32);
        let mut train_mse = Vec::with_capacity(self.landmarks);
        let mut val_mre = Vec::with_capacity(self.landmarks);
        for &s in sigmas.as_slice() {
            let z: f64 = StandardNormal.sample(rng);
            val_mre.push((self.expected_error(s) + p.noise * z).max(0.0));
            let d = (s - p.optimum) / p.optimum;
            train_mse.push(0.01 * (1.0 + d * d) * (1.0 + progress));
        }
        Ok(EpochStats { train_mse, val_mre })
    }

    fn same_weights(&self, other: &Self) -> bool {
        self == other
    }
}
