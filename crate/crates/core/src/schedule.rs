//! Cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

/// `lr(e) = min + (max - min) * (1 + cos(pi * e / period)) / 2`, with `e` in epochs.
///
/// Past `period` the curve keeps following the cosine rather than restarting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineAnnealing {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: f64,
}

impl CosineAnnealing {
    pub fn at_epoch(&self, epoch: f64) -> f64 {
        let phase = core::f64::consts::PI * epoch / self.period;
        self.lr_min + (self.lr_max - self.lr_min) * (1.0 + libm::cos(phase)) / 2.0
    }

    pub fn at_step(&self, step: usize, steps_per_epoch: usize) -> f64 {
        self.at_epoch(step as f64 / steps_per_epoch.max(1) as f64)
    }
}
