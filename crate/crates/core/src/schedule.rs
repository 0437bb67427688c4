//! Step-decay learning rate with linear warmup.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::config::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            base_lr: cfg.base_lr,
            warmup_epochs: cfg.warmup_epochs,
            decay_epochs: cfg.decay_epochs.clone(),
            decay_factor: cfg.decay_factor,
            epochs: cfg.epochs,
        }
    }

    /// Learning rate for the 0-based `epoch`.
    ///
    /// During warmup the rate climbs linearly to `base_lr`, reaching it at
    /// the last warmup epoch. Afterwards it is `base_lr` times
    /// `decay_factor` for every decay epoch already reached.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Validation(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        Ok(self.base_lr * Float::powi(self.decay_factor, decays as i32))
    }
}

pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    LrSchedule::from_config(cfg).lr_at(epoch)
}
