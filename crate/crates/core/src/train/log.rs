use crate::error::{Error, Result};

/// Training and validation history of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveLog {
    /// `(step, loss)` for every optimisation step.
    pub train: Vec<(u64, f64)>,
    /// `(epoch, mean validation Dice)`.
    pub val: Vec<(u64, f64)>,
    /// Mean training loss of each epoch, 1-based.
    pub epoch_loss: Vec<(u64, f64)>,
    /// Wall-clock seconds per pair, one entry per epoch.
    pub seconds_per_pair: Vec<f64>,
}

impl CurveLog {
    pub fn push_loss(&mut self, step: u64, loss: f64) -> Result<()> {
        if self.train.last().is_some_and(|&(s, _)| s >= step) {
            return Err(Error::InvalidConfig(format!("step {step} is not after the previous one")));
        }
        self.train.push((step, loss));
        Ok(())
    }

    pub fn push_val(&mut self, epoch: u64, dice: f64) -> Result<()> {
        if self.val.last().is_some_and(|&(e, _)| e >= epoch) {
            return Err(Error::InvalidConfig(format!("epoch {epoch} is not after the previous one")));
        }
        self.val.push((epoch, dice));
        Ok(())
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epoch_loss.iter().map(|e| e.1).collect()
    }

    pub fn val_dice(&self) -> Vec<f64> {
        self.val.iter().map(|e| e.1).collect()
    }
}

/// First 1-based epoch at which the trailing average of `val` over `window`
/// epochs exceeds `threshold`.
pub fn epochs_to_threshold(val: &[f64], threshold: f64, window: usize) -> Option<usize> {
    crate::io::moving_average(val, window).iter().position(|&v| v > threshold).map(|i| i + 1)
}
