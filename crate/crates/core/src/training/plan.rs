use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;

/// Which student head the distillation term trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillHead {
    /// Students carry the distillation token; KL trains its head while CE
    /// trains the class head.
    #[default]
    Token,
    /// No distillation token; both terms act on the class head.
    Class,
}

/// Temperature `tau` and mixing weight `lambda` of the self-distillation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda: f64,
    #[serde(default)]
    pub head: DistillHead,
}

impl DistillConfig {
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        let cfg = Self {
            tau,
            lambda,
            head: DistillHead::Token,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Whether student forwards carry the distillation token.
    pub fn uses_token(&self) -> bool {
        self.head == DistillHead::Token
    }
}

/// Learning-rate shape over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warm-up, then cosine decay to zero at the final step.
    Cosine { warmup_steps: usize },
}

impl LrSchedule {
    /// Multiplier on the base rate at 0-based `step` of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total.saturating_sub(warmup_steps).max(1) as f64;
                    let t = (step - warmup_steps) as f64 / span;
                    0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
                }
            }
        }
    }
}

/// Optimisation schedule for the mixed token-length trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    /// Replica-parallel steps instead of the sequential loop.
    #[serde(default)]
    pub parallel: bool,
    /// `None` trains every student with plain cross-entropy.
    #[serde(default)]
    pub distill: Option<DistillConfig>,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }

    pub fn student_token(&self) -> bool {
        self.distill.as_ref().is_some_and(DistillConfig::uses_token)
    }
}
