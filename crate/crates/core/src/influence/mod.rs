//! Local data influence: how much one optimizer step on a candidate example
//! lowers the student's loss on a fixed reference set.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{Example, SftSample};
use crate::langmodel::{sha256_hex, TinyLM, Vocab};
use crate::training::{one_step_train, ProbeOptimizer, TrainState, Trainable};

/// Held-out examples that define the student's capability. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    examples: Vec<Example>,
    samples: Vec<SftSample>,
    hash: String,
}

impl ReferenceSet {
    pub fn new(vocab: &Vocab, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("reference set".into()));
        }
        let samples = examples
            .iter()
            .map(|e| SftSample::from_example(vocab, e))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut bytes = Vec::new();
        for e in &examples {
            serde_json::to_writer(&mut bytes, e)?;
            bytes.push(b'\n');
        }
        Ok(Self {
            hash: sha256_hex(&bytes),
            examples,
            samples,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn samples(&self) -> &[SftSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    /// Instruction strings held by the set.
    pub fn instructions(&self) -> HashSet<&str> {
        self.examples.iter().map(|e| e.instruction.as_str()).collect()
    }

    /// Fails when any of `others` shares an instruction with the set.
    pub fn check_disjoint(&self, others: &[Example], what: &str) -> Result<()> {
        check_disjoint(&self.examples, others, &format!("reference set and {what}"))
    }
}

/// Fails when the two lists share an instruction string.
pub fn check_disjoint(a: &[Example], b: &[Example], what: &str) -> Result<()> {
    let seen: HashSet<&str> = a.iter().map(|e| e.instruction.as_str()).collect();
    if let Some(e) = b.iter().find(|e| seen.contains(e.instruction.as_str())) {
        return Err(Error::Overlap(format!("{what} share instruction {:?}", e.instruction)));
    }
    Ok(())
}

/// Influence of one probing example on one student state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    #[serde(flatten)]
    pub example: Example,
    pub loss_before: f64,
    pub loss_after: f64,
    pub influence: f64,
    pub probe_lr: f64,
    pub student_hash: String,
}

/// Mean per-example response loss of `model` on the reference set.
pub fn reference_loss(model: &TinyLM, reference: &ReferenceSet) -> Result<f64> {
    model.mean_loss(reference.samples())
}

/// Reference loss after one step on `sample`. Works for any [`Trainable`].
pub fn loss_after_probe<M: Trainable>(
    state: &TrainState<M>,
    sample: &M::Sample,
    reference: &[M::Sample],
    probe_lr: f64,
    optimizer: ProbeOptimizer,
) -> Result<f64> {
    let updated = one_step_train(state, sample, probe_lr, optimizer)?;
    updated.model().mean_loss(reference)
}

/// `(loss_before, loss_after, influence)` for one probe on any [`Trainable`].
pub fn probe_influence<M: Trainable>(
    state: &TrainState<M>,
    sample: &M::Sample,
    reference: &[M::Sample],
    probe_lr: f64,
    optimizer: ProbeOptimizer,
) -> Result<(f64, f64, f64)> {
    let before = state.model.mean_loss(reference)?;
    let after = loss_after_probe(state, sample, reference, probe_lr, optimizer)?;
    Ok((before, after, before - after))
}

/// Influence record for one example. The student is only read.
pub fn local_influence(
    example: &Example,
    student: &TrainState<TinyLM>,
    reference: &ReferenceSet,
    vocab: &Vocab,
    probe_lr: f64,
    optimizer: ProbeOptimizer,
) -> Result<InfluenceRecord> {
    let before = reference_loss(&student.model, reference)?;
    record(example, student, reference, vocab, probe_lr, optimizer, before, student.content_hash())
}

#[allow(clippy::too_many_arguments)]
fn record(
    example: &Example,
    student: &TrainState<TinyLM>,
    reference: &ReferenceSet,
    vocab: &Vocab,
    probe_lr: f64,
    optimizer: ProbeOptimizer,
    loss_before: f64,
    student_hash: String,
) -> Result<InfluenceRecord> {
    let sample = SftSample::from_example(vocab, example)?;
    let loss_after = loss_after_probe(student, &sample, reference.samples(), probe_lr, optimizer)?;
    Ok(InfluenceRecord {
        example: example.clone(),
        loss_before,
        loss_after,
        influence: loss_before - loss_after,
        probe_lr,
        student_hash,
    })
}

/// One record per probing example, in input order. Every probe starts from the
/// same student state; the result does not depend on `workers`.
pub fn collect_influences(
    probing: &[Example],
    student: &TrainState<TinyLM>,
    reference: &ReferenceSet,
    vocab: &Vocab,
    probe_lr: f64,
    optimizer: ProbeOptimizer,
    workers: usize,
) -> Result<Vec<InfluenceRecord>> {
    if probing.is_empty() {
        return Err(Error::Empty("probing dataset".into()));
    }
    let before = reference_loss(&student.model, reference)?;
    let hash = student.content_hash();
    let run = |ex: &Example| record(ex, student, reference, vocab, probe_lr, optimizer, before, hash.clone());
    if workers <= 1 {
        return probing.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| probing.par_iter().map(run).collect())
}

/// Fraction of records with strictly positive influence.
pub fn positive_fraction(records: &[InfluenceRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.influence > 0.0).count() as f64 / records.len() as f64
}

#[cfg(test)]
mod tests;
