use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Crossover point as a fraction of `epochs`.
    pub crossover: f64,
    /// Transition width as a fraction of `epochs`.
    pub sharpness: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            crossover: 0.7,
            sharpness: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("schedule.epochs must be at least 1".into()));
        }
        if !(self.crossover > 0.0 && self.crossover < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule.crossover must lie in (0, 1), got {}",
                self.crossover
            )));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule.sharpness must be positive, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }
}

/// `(w_drift, w_mse)` at epoch `e`, with `w_drift = σ((e − cE)/(kE))` and
/// `w_mse = 1 − w_drift`.
pub fn schedule_weights(e: f64, cfg: &ScheduleConfig) -> (f64, f64) {
    let total = cfg.epochs as f64;
    let arg = (e - cfg.crossover * total) / (cfg.sharpness * total);
    let w_drift = sigmoid(arg);
    (w_drift, 1.0 - w_drift)
}
