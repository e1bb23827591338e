use serde::{Deserialize, Serialize};

/// Linear warmup followed by inverse-square-root decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, peak_lr: f64) -> Self {
        Self { warmup_steps, peak_lr }
    }

    /// Learning rate for a 1-based step.
    pub fn lr(&self, step: u64) -> f64 {
        inverse_sqrt_lr(step, self)
    }
}

/// `peak · step / warmup` during warmup, `peak · sqrt(warmup / step)` after.
/// Step 0 is treated as step 1.
pub fn inverse_sqrt_lr(step: u64, schedule: &LrSchedule) -> f64 {
    let step = step.max(1) as f64;
    let warmup = schedule.warmup_steps as f64;
    if schedule.warmup_steps == 0 {
        return schedule.peak_lr / step.sqrt();
    }
    if step <= warmup {
        schedule.peak_lr * step / warmup
    } else {
        schedule.peak_lr * (warmup / step).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let s = LrSchedule::new(4000, 5e-4);
        assert!((s.lr(4000) - 5e-4).abs() < 1e-15);
        assert!((s.lr(2000) - 2.5e-4).abs() < 1e-15);
        assert!((s.lr(16000) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn positive_and_continuous_at_warmup() {
        let s = LrSchedule::new(100, 1e-3);
        for step in 1..1000 {
            assert!(s.lr(step) > 0.0);
        }
        let left = s.lr(100);
        let right = s.lr(101);
        assert!((left - right).abs() / left < 0.01);
    }
}
