//! Student evaluation: reference and held-out losses, the pairwise win-rate
//! proxy, greedy exact match, and the positive-influence fraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{prompt_ids, response_prompt, Example, SftSample};
use crate::influence::{check_disjoint, reference_loss, InfluenceRecord, ReferenceSet};
use crate::langmodel::{SamplingParams, TinyLM, Vocab};
use crate::synthesis::TaskGrammar;
use crate::training::Trainable;

/// Scores of one student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentScores {
    pub reference_loss: f64,
    pub heldout_loss: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub a: StudentScores,
    pub b: Option<StudentScores>,
    /// Share of held-out examples on which A's loss is strictly lower than
    /// B's, with ties counted as half.
    pub win_rate: Option<f64>,
    /// Positive-influence share of a freshly synthesized batch, if supplied.
    pub positive_fraction: Option<f64>,
}

/// Inputs shared by every evaluation of a run.
pub struct EvalSets<'a> {
    pub reference: &'a ReferenceSet,
    pub heldout: &'a [Example],
    /// Every dataset a student was trained or probed on.
    pub seen: &'a [&'a [Example]],
    pub grammar: &'a TaskGrammar,
    pub vocab: &'a Vocab,
}

/// Per-example response loss on `examples`.
pub fn example_losses(model: &TinyLM, examples: &[Example], vocab: &Vocab) -> Result<Vec<f64>> {
    let samples = examples
        .iter()
        .map(|e| SftSample::from_example(vocab, e))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    model.sample_losses(&samples)
}

/// Win-rate proxy of A over B from paired per-example losses.
pub fn win_rate(losses_a: &[f64], losses_b: &[f64]) -> Result<f64> {
    if losses_a.len() != losses_b.len() || losses_a.is_empty() {
        return Err(Error::Config("win rate needs two equal, non-empty loss lists".into()));
    }
    let score: f64 = losses_a
        .iter()
        .zip(losses_b)
        .map(|(a, b)| if a < b { 1.0 } else if a == b { 0.5 } else { 0.0 })
        .sum();
    Ok(score / losses_a.len() as f64)
}

/// Fraction of examples whose greedy response equals the grammar's answer.
pub fn exact_match(model: &TinyLM, examples: &[Example], grammar: &TaskGrammar, vocab: &Vocab) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("exact-match set".into()));
    }
    let params = SamplingParams::greedy(grammar.max_response_len() + 1);
    let mut hits = 0usize;
    for e in examples {
        let Some(answer) = grammar.solve(&e.instruction) else {
            continue;
        };
        let ids = prompt_ids(vocab, &response_prompt(&e.instruction))?;
        let out = model.sample(&ids, vocab.eos(), &params)?;
        if let Some((&last, body)) = out.split_last() {
            if last == vocab.eos() && vocab.decode(body)? == answer {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn scores(model: &TinyLM, sets: &EvalSets<'_>) -> Result<(StudentScores, Vec<f64>)> {
    let losses = example_losses(model, sets.heldout, sets.vocab)?;
    let s = StudentScores {
        reference_loss: reference_loss(model, sets.reference)?,
        heldout_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        exact_match: exact_match(model, sets.heldout, sets.grammar, sets.vocab)?,
    };
    Ok((s, losses))
}

/// Evaluates student A, and B when given. Fails if the held-out or reference
/// set shares an instruction with any seen dataset.
pub fn evaluate(a: &TinyLM, b: Option<&TinyLM>, sets: &EvalSets<'_>, fresh_batch: Option<&[InfluenceRecord]>) -> Result<EvalReport> {
    if sets.heldout.is_empty() {
        return Err(Error::Empty("held-out evaluation set".into()));
    }
    check_disjoint(sets.heldout, sets.reference.examples(), "held-out vs reference")?;
    for seen in sets.seen {
        check_disjoint(sets.heldout, seen, "held-out vs training data")?;
        sets.reference.check_disjoint(seen, "training data")?;
    }
    let (sa, la) = scores(a, sets)?;
    let (sb, rate) = match b {
        Some(b) => {
            let (sb, lb) = scores(b, sets)?;
            (Some(sb), Some(win_rate(&la, &lb)?))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        a: sa,
        b: sb,
        win_rate: rate,
        positive_fraction: fresh_batch.map(crate::influence::positive_fraction),
    })
}

pub(crate) fn check_heldout(heldout: &[Example], examples: &[Example], what: &str) -> Result<()> {
    check_disjoint(heldout, examples, &format!("held-out set and {what}"))
}
