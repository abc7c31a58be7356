//! Preference pairs from influence signs, and DPO on the teacher.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{continuation_ids, prompt_ids};
use crate::influence::InfluenceRecord;
use crate::langmodel::{TinyLM, TokenId, Vocab};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::rng_from_seed;
use crate::training::{AdamWState, WsdSchedule};

/// A prompt with a preferred and a dispreferred continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub seed_id: u64,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_influence: f64,
    pub rejected_influence: f64,
}

/// Token form of a triple: `BOS prompt` and the two `text EOS` continuations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTriple {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl PreferenceTriple {
    pub fn encode(&self, vocab: &Vocab) -> Result<EncodedTriple> {
        Ok(EncodedTriple {
            prompt: prompt_ids(vocab, &self.prompt)?,
            chosen: continuation_ids(vocab, &self.chosen)?,
            rejected: continuation_ids(vocab, &self.rejected)?,
        })
    }
}

/// Cross product of positive- and negative-influence records within each
/// `(seed_id, prompt)` group. Zero-influence records never pair. Output is
/// ordered by group, then chosen influence descending, then rejected
/// influence ascending.
pub fn build_preference_pairs(records: &[InfluenceRecord]) -> Vec<PreferenceTriple> {
    let mut groups: BTreeMap<(u64, &str), Vec<&InfluenceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.example.seed_id, r.example.prompt.as_str())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((seed_id, prompt), group) in groups {
        let mut pos: Vec<&InfluenceRecord> = group.iter().copied().filter(|r| r.influence > 0.0).collect();
        let mut neg: Vec<&InfluenceRecord> = group.iter().copied().filter(|r| r.influence < 0.0).collect();
        pos.sort_by(|a, b| b.influence.total_cmp(&a.influence));
        neg.sort_by(|a, b| a.influence.total_cmp(&b.influence));
        for p in &pos {
            for n in &neg {
                if p.example.instruction == n.example.instruction {
                    continue;
                }
                out.push(PreferenceTriple {
                    seed_id,
                    prompt: prompt.to_string(),
                    chosen: p.example.instruction.clone(),
                    rejected: n.example.instruction.clone(),
                    chosen_influence: p.influence,
                    rejected_influence: n.influence,
                });
            }
        }
    }
    out
}

/// DPO optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 1e-6,
            batch_size: 2,
            epochs: 1,
            weight_decay: 0.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.batch_size == 0 || self.epochs == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid DPO settings {self:?}")));
        }
        Ok(())
    }
}

/// `−log σ(margin)`, the per-triple objective given its β-scaled margin.
pub fn dpo_objective(margin: f64) -> f64 {
    -crate::numerics::log_sigmoid(margin)
}

/// `β·(π_c − ρ_c) − β·(π_r − ρ_r)` from sequence log-probabilities of the
/// policy (π) and reference (ρ).
pub fn margin_from_log_probs(policy_chosen: f64, policy_rejected: f64, ref_chosen: f64, ref_rejected: f64, beta: f64) -> f64 {
    beta * (policy_chosen - ref_chosen) - beta * (policy_rejected - ref_rejected)
}

/// Reference log-probabilities `(chosen, rejected)` for each triple.
pub fn reference_log_probs(reference: &TinyLM, triples: &[EncodedTriple]) -> Result<Vec<(f64, f64)>> {
    triples
        .iter()
        .map(|t| {
            Ok((
                reference.sequence_log_prob(&t.prompt, &t.chosen)?,
                reference.sequence_log_prob(&t.prompt, &t.rejected)?,
            ))
        })
        .collect()
}

/// Builds the mean DPO loss over `batch` on `g`. Returns the loss node, each
/// triple's margin node, and the policy parameter leaves.
pub fn dpo_loss_graph(
    g: &mut Graph,
    policy: &TinyLM,
    batch: &[&EncodedTriple],
    ref_logps: &[(f64, f64)],
    beta: f64,
    trainable: bool,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    if batch.is_empty() {
        return Err(Error::Empty("DPO batch".into()));
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> = batch
        .iter()
        .flat_map(|t| [(t.prompt.as_slice(), t.chosen.as_slice()), (t.prompt.as_slice(), t.rejected.as_slice())])
        .collect();
    let lp = policy.sequence_log_probs_graph(g, &pairs, trainable)?;
    let mut margins = Vec::with_capacity(batch.len());
    let mut total: Option<Var> = None;
    for (i, &(rc, rr)) in ref_logps.iter().enumerate().take(batch.len()) {
        let diff = g.sub(lp.terms[2 * i], lp.terms[2 * i + 1])?;
        let centered = g.add(diff, -(rc - rr))?;
        let margin = g.mul(centered, beta)?;
        let ls = g.log_sigmoid(margin)?;
        margins.push(margin);
        total = Some(match total {
            None => ls,
            Some(t) => g.add(t, ls)?,
        });
    }
    let total = total.expect("non-empty batch");
    let loss = g.mul(total, -1.0 / batch.len() as f64)?;
    g.ensure_finite(loss, "DPO loss")?;
    Ok((loss, margins, lp.params))
}

/// DPO loss of one triple. Gradients, when requested by the caller through
/// [`dpo_loss_graph`], reach only the policy.
pub fn dpo_loss(policy: &TinyLM, reference: &TinyLM, triple: &PreferenceTriple, beta: f64, vocab: &Vocab) -> Result<f64> {
    let enc = triple.encode(vocab)?;
    let refs = reference_log_probs(reference, std::slice::from_ref(&enc))?;
    let mut g = Graph::new();
    let (loss, _, _) = dpo_loss_graph(&mut g, policy, &[&enc], &refs, beta, false)?;
    Ok(g.value(loss).item()?)
}

/// Mean β-scaled log-ratio difference between chosen and rejected.
pub fn dpo_margin(policy: &TinyLM, reference: &TinyLM, triples: &[PreferenceTriple], beta: f64, vocab: &Vocab) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Empty("margin over zero triples".into()));
    }
    let enc = triples.iter().map(|t| t.encode(vocab)).collect::<Result<Vec<_>>>()?;
    let pol = reference_log_probs(policy, &enc)?;
    let refs = reference_log_probs(reference, &enc)?;
    let sum: f64 = pol
        .iter()
        .zip(&refs)
        .map(|(&(pc, pr), &(rc, rr))| margin_from_log_probs(pc, pr, rc, rr, beta))
        .sum();
    Ok(sum / triples.len() as f64)
}

/// One DPO optimizer step in a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoStepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub margin: f64,
    pub wallclock_ms: f64,
}

/// AdamW on the mean DPO loss per batch under a WSD schedule. The reference
/// model is only read.
pub fn dpo_train(
    policy: &mut TinyLM,
    reference: &TinyLM,
    triples: &[PreferenceTriple],
    config: &DpoConfig,
    vocab: &Vocab,
    rng_seed: u64,
) -> Result<Vec<DpoStepLog>> {
    config.validate()?;
    if triples.is_empty() {
        return Err(Error::Empty("preference set".into()));
    }
    let enc = triples.iter().map(|t| t.encode(vocab)).collect::<Result<Vec<_>>>()?;
    let refs = reference_log_probs(reference, &enc)?;
    let per_epoch = enc.len().div_ceil(config.batch_size);
    let schedule = WsdSchedule::new(config.lr, per_epoch * config.epochs)?;
    let mut opt = AdamWState::new(policy.params(), config.weight_decay);
    let mut rng = rng_from_seed(rng_seed);
    let started = Instant::now();
    let mut log = Vec::with_capacity(per_epoch * config.epochs);
    let mut order: Vec<usize> = (0..enc.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let step = log.len();
            let lr = schedule.lr(step)?;
            let batch: Vec<&EncodedTriple> = idx.iter().map(|&i| &enc[i]).collect();
            let batch_refs: Vec<(f64, f64)> = idx.iter().map(|&i| refs[i]).collect();
            let mut g = Graph::new();
            let (loss, margins, params) = dpo_loss_graph(&mut g, policy, &batch, &batch_refs, config.beta, true)?;
            g.backward(loss)?;
            let margin = margins.iter().map(|&m| g.value(m).data()[0]).sum::<f64>() / margins.len() as f64;
            let loss_value = g.value(loss).item()?;
            let mut grads = params
                .iter()
                .map(|&p| Tensor::new(g.value(p).shape().to_vec(), g.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(p).len()])))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            drop(g);
            opt.step(policy.params_mut(), &mut grads, lr)?;
            log.push(DpoStepLog {
                step,
                lr,
                loss: loss_value,
                margin,
                wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(log)
}

/// Deterministic split into `(train, held_out)`; the held-out part takes
/// `ceil(fraction · n)` triples when at least two exist, else none.
pub fn split_held_out(triples: &[PreferenceTriple], fraction: f64, rng_seed: u64) -> (Vec<PreferenceTriple>, Vec<PreferenceTriple>) {
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut rng_from_seed(rng_seed));
    let n_held = if triples.len() >= 2 {
        ((fraction * triples.len() as f64).ceil() as usize).clamp(1, triples.len() - 1)
    } else {
        0
    };
    let mut held: Vec<usize> = order[..n_held].to_vec();
    let mut train: Vec<usize> = order[n_held..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| triples[i].clone()).collect(),
        held.into_iter().map(|i| triples[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests;
