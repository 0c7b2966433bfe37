use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Batch size the base learning rate refers to.
pub const REFERENCE_BATCH: usize = 256;

/// Linear warm-up followed by half-cycle cosine decay to a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: f64,
    pub min_lr: f64,
    pub steps_per_epoch: usize,
    /// Effective batch: per-step batch times accumulation steps.
    pub batch_size: usize,
}

impl LrSchedule {
    /// `base_lr * batch / 256`.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / REFERENCE_BATCH as f64
    }

    pub fn total_steps(&self) -> usize {
        (self.epochs * self.steps_per_epoch as f64).round() as usize
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_epochs * self.steps_per_epoch as f64
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.effective_lr();
        let warm = self.warmup_steps();
        let s = step as f64;
        if s < warm {
            return peak * s / warm;
        }
        let total = self.total_steps() as f64;
        let span = (total - warm).max(1.0);
        let progress = ((s - warm) / span).clamp(0.0, 1.0);
        self.min_lr + (peak - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            base_lr: 2e-4,
            warmup_epochs: 4.0,
            epochs: 20.0,
            min_lr: 1e-6,
            steps_per_epoch: 10,
            batch_size: 512,
        }
    }

    #[test]
    fn warmup_starts_at_zero_and_peaks_at_effective_rate() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.effective_lr(), 4e-4);
        approx::assert_relative_eq!(s.lr_at(40), 4e-4, max_relative = 1e-15);
        approx::assert_relative_eq!(s.lr_at(20), 2e-4, max_relative = 1e-15);
    }

    #[test]
    fn decay_midpoint_is_halfway_to_floor() {
        let s = sched();
        // 40 warm-up steps, 160 decay steps; midpoint at 120.
        let expected = 1e-6 + (4e-4 - 1e-6) / 2.0;
        approx::assert_relative_eq!(s.lr_at(120), expected, max_relative = 1e-12);
    }

    #[test]
    fn decay_is_nonincreasing_and_floored() {
        let s = sched();
        let mut prev = f64::INFINITY;
        for step in 40..s.total_steps() {
            let lr = s.lr_at(step);
            assert!(lr <= prev && lr >= s.min_lr);
            prev = lr;
        }
    }
}
