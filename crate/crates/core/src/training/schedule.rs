use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from zero to `peak_lr`, then cosine decay to `min_lr` at
/// `max_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 8e-4,
            min_lr: 8e-5,
            warmup_steps: 1000,
            max_steps: 20_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::config(format!(
                "need 0 < min_lr ≤ peak_lr, got min_lr={} peak_lr={}",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_steps >= self.max_steps {
            return Err(Error::config(format!(
                "warmup_steps ({}) must be below max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        Ok(())
    }
}

pub fn lr_at(s: &ScheduleConfig, step: u64) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.max_steps {
        return s.min_lr;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.max_steps - s.warmup_steps) as f64;
    s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Learning rate as a function of the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine(ScheduleConfig),
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match self {
            LrSchedule::Cosine(s) => lr_at(s, step),
            LrSchedule::Constant { lr } => *lr,
        }
    }
}
