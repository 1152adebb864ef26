use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear warmup from 0 to `max_lr`, cosine decay to `min_lr` over
/// `decay_steps`, then constant at `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl LrSchedule {
    /// Floor at `floor_fraction * max_lr`.
    pub fn with_floor_fraction(
        max_lr: f64,
        floor_fraction: f64,
        warmup_steps: u64,
        decay_steps: u64,
    ) -> Result<Self> {
        let s = LrSchedule {
            max_lr,
            min_lr: floor_fraction * max_lr,
            warmup_steps,
            decay_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rates need 0 < min_lr <= max_lr, got min {} max {}",
                self.min_lr, self.max_lr
            )));
        }
        Ok(())
    }

    pub fn floor_fraction(&self) -> f64 {
        self.min_lr / self.max_lr
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        let t = step - self.warmup_steps;
        if t == 0 {
            return self.max_lr;
        }
        if t >= self.decay_steps {
            return self.min_lr;
        }
        let cos = (std::f64::consts::PI * t as f64 / self.decay_steps as f64).cos();
        self.min_lr + (self.max_lr - self.min_lr) * 0.5 * (1.0 + cos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = LrSchedule::with_floor_fraction(1e-3, 0.1, 300, 2000).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(300), 1e-3);
        assert_eq!(s.lr_at(2300), 0.1 * 1e-3);
        assert_eq!(s.lr_at(10_000), s.min_lr);
        assert!((s.lr_at(1300) - 0.55e-3).abs() < 1e-15);
    }

    #[test]
    fn no_warmup_starts_at_max() {
        let s = LrSchedule::with_floor_fraction(2e-3, 0.1, 0, 10).unwrap();
        assert_eq!(s.lr_at(0), 2e-3);
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(LrSchedule::with_floor_fraction(1e-3, 0.0, 1, 1).is_err());
        assert!(LrSchedule::with_floor_fraction(1e-3, 1.5, 1, 1).is_err());
    }
}
