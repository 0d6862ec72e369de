use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from zero to `peak_lr`, then linear decay back to zero at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
}

impl LrSchedule {
    pub fn new(warmup_steps: usize, total_steps: usize, peak_lr: f64) -> Result<Self> {
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup_steps must satisfy 0 < {warmup_steps} <= total_steps {total_steps}"
            )));
        }
        if !(peak_lr.is_finite() && peak_lr >= 0.0) {
            return Err(Error::Config(format!(
                "invalid peak learning rate {peak_lr}"
            )));
        }
        Ok(LrSchedule {
            warmup_steps,
            total_steps,
            peak_lr,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} is past the end of a {}-step schedule",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            return Ok(self.peak_lr * (step as f64 / self.warmup_steps as f64));
        }
        let remaining = (self.total_steps - step) as f64;
        Ok(self.peak_lr * remaining / (self.total_steps - self.warmup_steps) as f64)
    }
}
