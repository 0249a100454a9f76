//! Linear warmup followed by cosine annealing.

use crate::error::{Error, Result};

use super::TrainConfig;

/// Learning rate at `step` in [0, total_steps]: linear from min_lr to
/// base_lr over the warmup, then cosine from base_lr down to min_lr.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_steps;
    let warmup = cfg.warmup();
    if step > total {
        return Err(Error::Argument(format!(
            "step {step} out of schedule range 0..={total}"
        )));
    }
    if step < warmup {
        return Ok(cfg.min_lr + (cfg.base_lr - cfg.min_lr) * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(cfg.min_lr
        + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
