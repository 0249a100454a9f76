//! Training and evaluation loops over synthetic phantoms.
//!
//! Validation indices live in a disjoint, fixed index range so the held-out
//! split never overlaps training data regardless of counts.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

use super::loss::{argmax_labels, combined_loss, dice_score, Labels};
use super::optim::AdamW;
use super::schedule::lr_at;
use super::synthetic::{generate_synthetic, SyntheticDataSpec};
use super::{TrainConfig, DICE_SMOOTH};

pub const VAL_INDEX_BASE: u64 = 1 << 20;

/// One metrics-history row (one evaluation point).
#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Foreground per-class dice on the held-out split (classes 1..K).
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub final_loss: f64,
    pub next_step: u64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Dice per class 0..K (background included), averaged over volumes.
    pub per_class: Vec<f64>,
    pub volumes: usize,
}

impl EvalReport {
    /// Mean over foreground classes 1..K.
    pub fn mean_foreground(&self) -> f64 {
        let fg = &self.per_class[1..];
        fg.iter().sum::<f64>() / fg.len() as f64
    }
}

fn stack_batch<T: Scalar>(items: &[(Tensor<T>, Labels)]) -> Result<(Tensor<T>, Labels)> {
    let mut vol_data = Vec::new();
    let mut lab = Vec::new();
    for (v, l) in items {
        vol_data.extend_from_slice(v.data());
        lab.push(l.clone());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].0.shape());
    Ok((Tensor::from_vec(vol_data, &shape)?, Labels::stack(&lab)?))
}

/// Phantom cache: generation is deterministic but not free, and the loop
/// revisits each index many times.
struct DataCache<T: Scalar> {
    spec: SyntheticDataSpec,
    slots: std::collections::HashMap<u64, (Tensor<T>, Labels)>,
}

impl<T: Scalar> DataCache<T> {
    fn new(spec: SyntheticDataSpec) -> Self {
        DataCache {
            spec,
            slots: std::collections::HashMap::new(),
        }
    }
    fn get(&mut self, index: u64) -> Result<(Tensor<T>, Labels)> {
        if let Some(hit) = self.slots.get(&index) {
            return Ok(hit.clone());
        }
        let pair = generate_synthetic::<T>(&self.spec, index)?;
        self.slots.insert(index, pair.clone());
        Ok(pair)
    }
}

/// Evaluate argmax Dice per class over explicit (volume, labels) pairs.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &[(Tensor<T>, Labels)]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Argument("evaluate on zero volumes".into()));
    }
    let k = net.config.num_classes;
    let mut sums = vec![0.0f64; k];
    no_grad(|| -> Result<()> {
        for (vol, lab) in data {
            let mut shape = vec![1];
            shape.extend_from_slice(vol.shape());
            let x = vol.reshape(&shape)?;
            let out = net.forward(&x)?;
            let pred = argmax_labels(&out.logits)?;
            let mut target_shape = vec![1];
            target_shape.extend_from_slice(&lab.shape);
            let target = Labels::new(target_shape, lab.data.clone())?;
            for (c, sum) in sums.iter_mut().enumerate() {
                *sum += dice_score(&pred, &target, c as u8)?;
            }
        }
        Ok(())
    })?;
    for s in &mut sums {
        *s /= data.len() as f64;
    }
    Ok(EvalReport {
        per_class: sums,
        volumes: data.len(),
    })
}

/// Generate the held-out split for a data spec.
pub fn validation_set<T: Scalar>(
    spec: &SyntheticDataSpec,
    count: usize,
) -> Result<Vec<(Tensor<T>, Labels)>> {
    (0..count)
        .map(|i| generate_synthetic::<T>(spec, VAL_INDEX_BASE + i as u64))
        .collect()
}

/// Train `net` in place. `start_step` > 0 resumes the step counter (the
/// schedule and history continue monotonically). Each history row is passed
/// to `on_row` as it is produced.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    tcfg: &TrainConfig,
    dcfg: &SyntheticDataSpec,
    start_step: u64,
    mut on_row: impl FnMut(&HistoryRow, &mut Network<T>) -> Result<()>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    dcfg.validate()?;
    let mut cache = DataCache::<T>::new(dcfg.clone());
    let val: Vec<(Tensor<T>, Labels)> = (0..tcfg.val_count)
        .map(|i| cache.get(VAL_INDEX_BASE + i as u64))
        .collect::<Result<_>>()?;

    let mut opt = AdamW::<T>::new(tcfg.weight_decay);
    opt.step = start_step;
    let mut history = Vec::new();
    let mut final_loss = f64::NAN;

    for step in (start_step as usize)..tcfg.total_steps {
        let lr = lr_at(step, tcfg)?;
        let batch: Vec<(Tensor<T>, Labels)> = (0..tcfg.batch_size)
            .map(|j| {
                let idx = (step * tcfg.batch_size + j) % tcfg.train_count;
                cache.get(idx as u64)
            })
            .collect::<Result<_>>()?;
        let (x, labels) = stack_batch(&batch)?;
        let out = net.forward(&x)?;
        let mut loss = combined_loss(
            &out.logits,
            &labels,
            tcfg.dice_weight,
            tcfg.ce_weight,
            DICE_SMOOTH,
        )?;
        if net.config.deep_supervision {
            // aux head j sits at stage j+2's grid: input extent divided by
            // the product of strides up to that stage
            let mut factor = net.config.stages[0].patch.stride[0];
            for (j, aux) in out.aux_logits.iter().enumerate() {
                factor *= net.config.stages[j + 1].patch.stride[0];
                let target = labels.downsample_nearest(factor)?;
                let w = net.config.ds_weights[j];
                let aux_loss =
                    combined_loss(aux, &target, tcfg.dice_weight, tcfg.ce_weight, DICE_SMOOTH)?
                        .scale(T::from_f64_c(w));
                loss = loss.add(&aux_loss)?;
            }
        }
        let loss_val = loss.item().to_f64_c();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged to {loss_val} at step {step}"
            )));
        }
        final_loss = loss_val;
        loss.backward()?;
        opt.step(net, lr)?;

        if (step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.total_steps {
            let report = evaluate(net, &val)?;
            let row = HistoryRow {
                step,
                lr,
                loss: loss_val,
                dice: report.per_class[1..].to_vec(),
            };
            on_row(&row, net)?;
            history.push(row);
        }
    }
    Ok(TrainOutcome {
        history,
        final_loss,
        next_step: tcfg.total_steps as u64,
    })
}

/// Metrics history CSV: `step,lr,loss,dice_c1,...`, one row per evaluation,
/// '.' decimals, LF line endings.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    let classes = history.first().map_or(3, |r| r.dice.len());
    let mut buf = String::from("step,lr,loss");
    for c in 1..=classes {
        buf.push_str(&format!(",dice_c{c}"));
    }
    buf.push('\n');
    for row in history {
        buf.push_str(&format!("{},{},{}", row.step, row.lr, row.loss));
        for d in &row.dice {
            buf.push_str(&format!(",{d}"));
        }
        buf.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
