//! Losses, metrics, AdamW, the LR schedule, synthetic data and the
//! train/eval loops.

pub mod loss;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod synthetic;

pub use loss::{argmax_labels, combined_loss, cross_entropy, dice_loss, dice_score, Labels};
pub use optim::{adamw_update, AdamW};
pub use run::{evaluate, train, EvalReport, HistoryRow, TrainOutcome};
pub use schedule::lr_at;
pub use synthetic::{generate_synthetic, SyntheticDataSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    /// None materializes to 5% of total_steps.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate (and append a metrics row) every this many steps.
    pub eval_every: usize,
    /// Training phantoms; sampled cyclically.
    pub train_count: usize,
    /// Held-out phantoms for evaluation.
    pub val_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            min_lr: 1e-6,
            warmup_steps: None,
            total_steps: 2000,
            batch_size: 2,
            dice_weight: 1.0,
            ce_weight: 1.0,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 100,
            train_count: 64,
            val_count: 16,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 20)
    }

    /// Fill derived defaults so the persisted effective config is complete.
    pub fn materialize(&mut self) {
        self.warmup_steps = Some(self.warmup());
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.warmup() >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup(),
                self.total_steps
            )));
        }
        if self.dice_weight < 0.0
            || self.ce_weight < 0.0
            || (self.dice_weight == 0.0 && self.ce_weight == 0.0)
        {
            return Err(Error::Config(
                "loss weights must be non-negative, not both zero".into(),
            ));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.train_count == 0 {
            return Err(Error::Config("train_count must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config("need 0 <= min_lr <= base_lr, base_lr > 0".into()));
        }
        Ok(())
    }
}
