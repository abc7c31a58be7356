//! Supervised fine-tuning: AdamW, the warmup-stable-decay schedule, epoch
//! loops, snapshots, and the single-example update used by influence probes.
//!
//! Everything here is generic over [`Trainable`], so the same code drives the
//! transformer and the tiny closed-form models used in tests.

mod adamw;
mod quadratic;
mod schedule;
mod sft;
mod snapshot;

pub use adamw::{AdamWConfig, AdamWState, BETA1, BETA2, EPS};
pub use quadratic::QuadraticModel;
pub use schedule::{wsd_lr, WsdSchedule, MIN_LR_FACTOR};
pub use sft::{one_step_train, sft_epoch, sft_train, write_log_jsonl, ProbeOptimizer, StepLog};
pub use snapshot::{restore, snapshot, ModelSnapshot, TrainState};

use crate::error::{Error, Result};
use crate::example::SftSample;
use crate::langmodel::TinyLM;
use crate::numerics::{Graph, Tensor};

/// A model with a differentiable per-sample loss.
pub trait Trainable: Clone + Send + Sync {
    type Sample: Sync;

    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];

    /// Mean loss over the batch and its gradient for every parameter.
    fn loss_and_grads(&self, batch: &[&Self::Sample]) -> Result<(f64, Vec<Tensor>)>;

    /// Loss of each sample on its own.
    fn sample_losses(&self, samples: &[Self::Sample]) -> Result<Vec<f64>>;

    fn fits(&self, sample: &Self::Sample) -> bool;

    /// Stable fingerprint of the parameter values and architecture.
    fn content_hash(&self) -> String;

    /// Whether `other` has the same architecture (so states may be swapped).
    fn same_architecture(&self, other: &Self) -> bool {
        self.params().len() == other.params().len()
            && self.params().iter().zip(other.params()).all(|(a, b)| a.shape() == b.shape())
    }

    /// Arithmetic mean of [`Self::sample_losses`].
    fn mean_loss(&self, samples: &[Self::Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("loss over zero samples".into()));
        }
        let losses = self.sample_losses(samples)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Rows evaluated per packed forward pass when scoring many samples.
const EVAL_CHUNK: usize = 64;

impl TinyLM {
    /// Token-mean masked cross-entropy over a packed batch, as a graph node.
    pub fn sft_loss_graph(&self, g: &mut Graph, batch: &[&SftSample], trainable: bool) -> Result<(crate::numerics::Var, Vec<crate::numerics::Var>)> {
        let inputs: Vec<&[usize]> = batch.iter().map(|s| s.input()).collect();
        for s in batch {
            self.check_fits(s.len())?;
        }
        let fwd = self.forward_packed(g, &inputs, trainable)?;
        let lp = g.log_softmax(fwd.logits)?;
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for s in batch {
            targets.extend_from_slice(s.targets());
            mask.extend(s.mask());
        }
        let loss = g.masked_cross_entropy(lp, &targets, &mask)?;
        Ok((loss, fwd.params))
    }
}

impl Trainable for TinyLM {
    type Sample = SftSample;

    fn params(&self) -> &[Tensor] {
        TinyLM::params(self)
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        TinyLM::params_mut(self)
    }

    fn loss_and_grads(&self, batch: &[&SftSample]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (loss, params) = self.sft_loss_graph(&mut g, batch, true)?;
        g.backward(loss)?;
        let value = g.value(loss).item()?;
        let grads = params
            .iter()
            .map(|&p| {
                let shape = g.value(p).shape().to_vec();
                let data = g.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                Tensor::new(shape, data).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, grads))
    }

    fn sample_losses(&self, samples: &[SftSample]) -> Result<Vec<f64>> {
        let v = self.config().vocab;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let inputs: Vec<&[usize]> = chunk.iter().map(|s| s.input()).collect();
            for s in chunk {
                self.check_fits(s.len())?;
            }
            let mut g = Graph::new();
            let fwd = self.forward_packed(&mut g, &inputs, false)?;
            let lp = g.log_softmax(fwd.logits)?;
            let lp = g.value(lp).data();
            for (s, seg) in chunk.iter().zip(&fwd.segments) {
                let mut total = 0.0;
                let mut n = 0usize;
                for (t, (&tok, m)) in s.targets().iter().zip(s.mask()).enumerate() {
                    if m {
                        total += lp[(seg.start + t) * v + tok];
                        n += 1;
                    }
                }
                if n == 0 {
                    return Err(crate::numerics::NumericsError::EmptyMask.into());
                }
                out.push(-total / n as f64);
            }
        }
        Ok(out)
    }

    fn fits(&self, sample: &SftSample) -> bool {
        sample.len() <= self.config().context
    }

    fn content_hash(&self) -> String {
        TinyLM::content_hash(self)
    }

    fn same_architecture(&self, other: &Self) -> bool {
        self.config() == other.config()
    }
}
