use serde::{Deserialize, Serialize};

use crate::data::PadMode;
use crate::error::{Error, Result};
use crate::scalar::Precision;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Stages whose correlation enters the loss and the reports.
    pub tap_stages: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr_initial: f64,
    /// 0-based epochs from which the learning rate is multiplied by
    /// `lr_drop_factor` once more.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub augment: bool,
    pub pad_mode: PadMode,
}

impl Default for TrainConfig {
    /// The full 100-epoch recipe with drops at 30, 60 and 90.
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            tap_stages: Vec::new(),
            epochs: 100,
            batch_size: 128,
            eval_batch_size: 256,
            lr_initial: 0.1,
            lr_drop_epochs: vec![30, 60, 90],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            precision: Precision::F64,
            augment: true,
            pad_mode: PadMode::Reflect,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.tap_stages.is_empty() {
            return fail("a positive lambda needs at least one tapped stage".into());
        }
        let mut seen = self.tap_stages.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.tap_stages.len() {
            return fail(format!("tap_stages {:?} has duplicates", self.tap_stages));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            ));
        }
        if self.eval_batch_size == 0 {
            return fail("eval_batch_size must be at least 1".into());
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return fail(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "lr_drop_epochs {:?} must be strictly increasing",
                self.lr_drop_epochs
            ));
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return fail(format!(
                    "lr drop at epoch {last} is not before the final epoch {}",
                    self.epochs
                ));
            }
        }
        if !(self.lr_drop_factor.is_finite() && self.lr_drop_factor > 0.0) {
            return fail(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    /// Taps in ascending order.
    pub fn sorted_taps(&self) -> Vec<usize> {
        let mut taps = self.tap_stages.clone();
        taps.sort_unstable();
        taps
    }
}

/// Learning rate for a 0-based epoch: one drop per listed epoch `<= epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let drops = config.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    config.lr_initial * config.lr_drop_factor.powi(drops as i32)
}
