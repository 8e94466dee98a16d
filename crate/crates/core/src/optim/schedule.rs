use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step learning-rate schedule and batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    /// First epoch (0-based) that uses `lr_after`.
    pub decay_epoch: usize,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 200,
            lr_initial: 1e-2,
            lr_after: 1e-3,
            decay_epoch: 150,
            batch_size: 4,
        }
    }
}

impl TrainSchedule {
    /// Shortens or lengthens the run, keeping the decay at the same
    /// fraction of training.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let frac = self.decay_epoch as f64 / self.epochs as f64;
        TrainSchedule {
            epochs,
            decay_epoch: ((epochs as f64 * frac).round() as usize).min(epochs.saturating_sub(1)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("epochs and batch size must be positive"));
        }
        if self.decay_epoch >= self.epochs {
            return Err(Error::param(format!(
                "decay epoch {} must be before the last epoch ({})",
                self.decay_epoch, self.epochs
            )));
        }
        for lr in [self.lr_initial, self.lr_after] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::param(format!("learning rates must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::param(format!(
                "epoch {epoch} is outside the schedule of {} epochs",
                self.epochs
            )));
        }
        Ok(if epoch < self.decay_epoch {
            self.lr_initial
        } else {
            self.lr_after
        })
    }
}
