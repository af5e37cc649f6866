//! Reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` whenever the tracked validation
/// loss has not improved for `patience` consecutive epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub wait: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        ReduceLrOnPlateau {
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the new learning rate if a
    /// reduction fires.
    pub fn step(&mut self, val_loss: f64, current_lr: f64) -> Option<f64> {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            return None;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            let new_lr = (current_lr * self.factor).max(self.min_lr);
            if new_lr < current_lr {
                return Some(new_lr);
            }
        }
        None
    }
}
