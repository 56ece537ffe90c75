//! Learning-rate schedules for the two training stages.

use std::f64::consts::PI;

/// Pure function of the step (or epoch) index.
#[derive(Clone, Copy, Debug)]
pub enum LrSchedule {
    /// Linear warmup followed by a single half-cosine decay from `base_lr`
    /// to `min_lr`; the last step lands exactly on `min_lr`.
    HalfCycle {
        base_lr: f64,
        min_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
    /// Cosine annealing with warm restarts: starts at `max_lr` on every
    /// period boundary and decays toward `min_lr` within the period.
    Periodic { max_lr: f64, min_lr: f64, period: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: f64) -> f64 {
        match *self {
            LrSchedule::HalfCycle {
                base_lr,
                min_lr,
                warmup_steps,
                total_steps,
            } => {
                let warmup = warmup_steps as f64;
                if step < warmup {
                    return base_lr * (step + 1.0) / warmup;
                }
                let span = (total_steps.saturating_sub(1) as f64 - warmup).max(1.0);
                let phase = ((step - warmup) / span).clamp(0.0, 1.0);
                min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * phase).cos())
            }
            LrSchedule::Periodic {
                max_lr,
                min_lr,
                period,
            } => {
                let phase = (step.rem_euclid(period)) / period;
                min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (PI * phase).cos())
            }
        }
    }
}

/// Batch-proportional scaling of the base learning rate.
pub fn linear_scaled_lr(lr_base: f64, batch_size: usize) -> f64 {
    lr_base * batch_size as f64 / 256.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_is_max_at_period_boundary() {
        let s = LrSchedule::Periodic {
            max_lr: 1e-3,
            min_lr: 1e-9,
            period: 60.0,
        };
        assert_eq!(s.lr_at(0.0), 1e-3);
        assert!((s.lr_at(60.0) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(120.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn periodic_midpoint_is_average_of_extremes() {
        let s = LrSchedule::Periodic {
            max_lr: 1e-3,
            min_lr: 1e-9,
            period: 60.0,
        };
        let mid = s.lr_at(30.0);
        assert!((mid - (1e-3 + 1e-9) / 2.0).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn half_cycle_ends_at_min_lr() {
        let s = LrSchedule::HalfCycle {
            base_lr: 1e-3,
            min_lr: 1e-6,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert!((s.lr_at(99.0) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn half_cycle_warms_up_linearly_then_decays_monotonically() {
        let s = LrSchedule::HalfCycle {
            base_lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 10,
            total_steps: 50,
        };
        assert!(s.lr_at(0.0) < s.lr_at(5.0));
        assert!((s.lr_at(9.0) - 1e-3).abs() < 1e-12);
        let mut prev = s.lr_at(10.0);
        for step in 11..50 {
            let lr = s.lr_at(step as f64);
            assert!(lr <= prev + 1e-15, "not monotone at step {step}");
            prev = lr;
        }
    }

    #[test]
    fn linear_scaling_rule() {
        assert_eq!(linear_scaled_lr(1e-3, 256), 1e-3);
        assert_eq!(linear_scaled_lr(1e-3, 20), 1e-3 * 20.0 / 256.0);
    }
}
