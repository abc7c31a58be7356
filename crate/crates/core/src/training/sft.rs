use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{snapshot, ModelSnapshot, TrainState, Trainable, WsdSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// One optimizer step in a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wallclock_ms: f64,
}

/// Optimizer state used by a one-step probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOptimizer {
    /// Continue from the student's moments and step counter.
    #[default]
    Inherit,
    /// Zeroed moments, as if the probe were the first step.
    Fresh,
}

/// One shuffled pass over `data`, taking schedule steps `start_step..`.
///
/// Samples that do not fit the model context are skipped with a warning.
pub fn sft_epoch<M: Trainable>(
    state: &mut TrainState<M>,
    data: &[M::Sample],
    batch_size: usize,
    schedule: &WsdSchedule,
    start_step: usize,
    rng_seed: u64,
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).filter(|&i| state.model.fits(&data[i])).collect();
    let skipped = data.len() - order.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} of {} samples longer than the model context", data.len());
    }
    if order.is_empty() {
        return Err(Error::Empty("every training sample exceeds the context".into()));
    }
    order.shuffle(&mut rng_from_seed(rng_seed));
    let started = Instant::now();
    let mut log = Vec::with_capacity(order.len().div_ceil(batch_size));
    for (i, idx) in order.chunks(batch_size).enumerate() {
        let step = start_step + i;
        let lr = schedule.lr(step)?;
        let batch: Vec<&M::Sample> = idx.iter().map(|&j| &data[j]).collect();
        let (loss, mut grads) = state.model.loss_and_grads(&batch)?;
        state.opt.step(state.model.params_mut(), &mut grads, lr)?;
        log.push(StepLog {
            step,
            lr,
            loss,
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// `epochs` passes under one WSD schedule spanning the whole run.
pub fn sft_train<M: Trainable>(
    state: &mut TrainState<M>,
    data: &[M::Sample],
    batch_size: usize,
    epochs: usize,
    lr_max: f64,
    rng_seed: u64,
) -> Result<Vec<StepLog>> {
    if batch_size == 0 || epochs == 0 {
        return Err(Error::Config("batch size and epoch count must be at least 1".into()));
    }
    let kept = data.iter().filter(|s| state.model.fits(s)).count();
    if kept == 0 {
        return Err(Error::Empty("no training sample fits the context".into()));
    }
    let per_epoch = kept.div_ceil(batch_size);
    let schedule = WsdSchedule::new(lr_max, per_epoch * epochs)?;
    let mut log = Vec::with_capacity(per_epoch * epochs);
    for e in 0..epochs {
        let seed = derive_seed(rng_seed, &[e as u64]);
        log.extend(sft_epoch(state, data, batch_size, &schedule, e * per_epoch, seed)?);
    }
    Ok(log)
}

/// The state after exactly one AdamW step on `sample` alone, computed on a
/// private copy. `state` is left untouched.
pub fn one_step_train<M: Trainable>(
    state: &TrainState<M>,
    sample: &M::Sample,
    lr: f64,
    optimizer: ProbeOptimizer,
) -> Result<ModelSnapshot<M>> {
    if !state.model.fits(sample) {
        return Err(Error::OutOfRange("probe sample exceeds the model context".into()));
    }
    let mut copy = state.clone();
    if optimizer == ProbeOptimizer::Fresh {
        copy.opt = copy.opt.reset();
    }
    let (_, mut grads) = copy.model.loss_and_grads(&[sample])?;
    copy.opt.step(copy.model.params_mut(), &mut grads, lr)?;
    Ok(snapshot(&copy))
}

/// Writes one JSON object per line.
pub fn write_log_jsonl<T: Serialize, W: Write>(records: &[T], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
