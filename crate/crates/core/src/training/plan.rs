use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::OptimConfig;
use super::schedule::LrSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Pkt,
    Jkt,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Pkt => "pkt",
            Stage::Jkt => "jkt",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "pkt" => Ok(Stage::Pkt),
            "jkt" => Ok(Stage::Jkt),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::config(format!("unknown stage {s:?}"))),
        }
    }
}

/// Learning-rate settings, resolved against a step count by
/// [`ScheduleConfig::resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "defaults::max_lr")]
    pub max_lr: f64,
    #[serde(default = "defaults::floor_fraction")]
    pub floor_fraction: f64,
    /// Explicit warmup length; otherwise `warmup_fraction` of the steps.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default = "defaults::warmup_fraction")]
    pub warmup_fraction: f64,
    /// Explicit decay length; otherwise every step after warmup.
    #[serde(default)]
    pub decay_steps: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            max_lr: defaults::max_lr(),
            floor_fraction: defaults::floor_fraction(),
            warmup_steps: None,
            warmup_fraction: defaults::warmup_fraction(),
            decay_steps: None,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self, total_steps: u64) -> Result<LrSchedule> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return Err(Error::config(format!(
                "floor_fraction must be in (0, 1], got {}",
                self.floor_fraction
            )));
        }
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| (total_steps as f64 * self.warmup_fraction).round() as u64);
        let decay = self
            .decay_steps
            .unwrap_or(total_steps.saturating_sub(warmup))
            .max(1);
        LrSchedule::with_floor_fraction(self.max_lr, self.floor_fraction, warmup, decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftTarget {
    pub temperature: f64,
    /// Weight of the KL term; the cross entropy gets `1 - weight`.
    pub weight: f64,
}

/// Everything that determines one stage's optimization trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    #[serde(default = "defaults::stage")]
    pub stage: Stage,
    /// Passes over the training samples (per layer for PKT).
    #[serde(default = "defaults::epochs")]
    pub epochs: f64,
    /// Tokens per run (per layer for PKT); overrides `epochs` when set.
    #[serde(default)]
    pub token_budget: Option<u64>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Write a resumable checkpoint every this many steps.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "defaults::divergence_factor")]
    pub divergence_factor: f64,
    #[serde(default = "defaults::divergence_window")]
    pub divergence_window: usize,
    #[serde(default)]
    pub soft_target: Option<SoftTarget>,
    /// Per-layer weights of the joint objective; equal when absent.
    #[serde(default)]
    pub layer_weights: Option<Vec<f64>>,
}

mod defaults {
    use super::Stage;

    pub fn stage() -> Stage {
        Stage::Pretrain
    }
    pub fn max_lr() -> f64 {
        1e-3
    }
    pub fn floor_fraction() -> f64 {
        0.1
    }
    pub fn warmup_fraction() -> f64 {
        0.025
    }
    pub fn epochs() -> f64 {
        1.0
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn divergence_factor() -> f64 {
        10.0
    }
    pub fn divergence_window() -> usize {
        50
    }
}

impl TrainPlan {
    pub fn new(stage: Stage) -> Self {
        TrainPlan {
            stage,
            epochs: defaults::epochs(),
            token_budget: None,
            batch_size: defaults::batch_size(),
            seed: 0,
            checkpoint_every: None,
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            divergence_factor: defaults::divergence_factor(),
            divergence_window: defaults::divergence_window(),
            soft_target: None,
            layer_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.epochs >= 0.0 && self.epochs.is_finite()) {
            return Err(Error::config(format!(
                "epochs must be a non-negative number, got {}",
                self.epochs
            )));
        }
        if self.token_budget == Some(0) {
            return Err(Error::config("token_budget must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        if !(self.divergence_factor > 1.0) || self.divergence_window == 0 {
            return Err(Error::config(
                "divergence detector needs factor > 1 and a positive window",
            ));
        }
        if let Some(w) = &self.layer_weights {
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::config(
                    "layer weights must be finite and non-negative",
                ));
            }
        }
        self.optim.validate()?;
        self.schedule.resolve(1).map(|_| ())
    }

    /// Optimizer steps for `n_samples` windows of `context_len` tokens.
    pub fn steps_for(&self, n_samples: usize, context_len: usize) -> u64 {
        match self.token_budget {
            Some(budget) => (budget / (self.batch_size * context_len) as u64).max(1),
            None => (self.epochs * n_samples as f64 / self.batch_size as f64).ceil() as u64,
        }
    }

    pub fn tokens_for(&self, steps: u64, context_len: usize) -> u64 {
        steps * self.batch_size as u64 * context_len as u64
    }
}
