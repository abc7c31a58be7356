use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup-stable-decay learning-rate schedule.
///
/// Linear warmup from 0, a constant plateau at `lr_max`, then geometric decay
/// ending at exactly `lr_max / 1000` on the final step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub stable_ratio: f64,
    pub decay_ratio: f64,
}

pub const MIN_LR_FACTOR: f64 = 1000.0;

impl WsdSchedule {
    pub fn new(lr_max: f64, total_steps: usize) -> Result<Self> {
        Self::with_ratios(lr_max, total_steps, 0.1, 0.5, 0.4)
    }

    pub fn with_ratios(lr_max: f64, total_steps: usize, warmup: f64, stable: f64, decay: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(lr_max.is_finite() && lr_max >= 0.0) {
            return Err(Error::Config(format!("lr_max must be finite and non-negative, got {lr_max}")));
        }
        if [warmup, stable, decay].iter().any(|r| !(0.0..=1.0).contains(r)) || ((warmup + stable + decay) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "phase ratios {warmup}/{stable}/{decay} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(Self {
            lr_max,
            total_steps,
            warmup_ratio: warmup,
            stable_ratio: stable,
            decay_ratio: decay,
        })
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_max / MIN_LR_FACTOR
    }

    /// Index of the first step at `lr_max`.
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_ratio * self.total_steps as f64).round() as usize).min(self.total_steps - 1)
    }

    /// Index of the first decay step.
    pub fn decay_start(&self) -> usize {
        let s = self.warmup_steps() + (self.stable_ratio * self.total_steps as f64).round() as usize;
        s.min(self.total_steps - 1)
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        wsd_lr(self, step)
    }
}

/// Learning rate at `step` (0-based).
pub fn wsd_lr(s: &WsdSchedule, step: usize) -> Result<f64> {
    if step >= s.total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} (schedule has {} steps)",
            s.total_steps
        )));
    }
    let last = s.total_steps - 1;
    if step == last && last > 0 {
        return Ok(s.lr_min());
    }
    let w = s.warmup_steps();
    if step < w {
        return Ok(s.lr_max * step as f64 / w as f64);
    }
    let d = s.decay_start();
    if step <= d {
        return Ok(s.lr_max);
    }
    let frac = (step - d) as f64 / (last - d) as f64;
    Ok(s.lr_max * (1.0 / MIN_LR_FACTOR).powf(frac))
}
