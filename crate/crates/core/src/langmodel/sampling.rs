use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TinyLM, TokenId};
use crate::rng::rng_from_seed;

/// Decoding knobs. Penalties only look at tokens generated so far, never the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub repetition_penalty: f64,
    pub max_tokens: usize,
    pub rng_seed: u64,
}

/// Below this temperature decoding is greedy.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

impl SamplingParams {
    /// Diverse settings used when writing new instructions.
    pub fn instruction_preset(max_tokens: usize, rng_seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            frequency_penalty: 0.0,
            presence_penalty: 1.0,
            repetition_penalty: 1.5,
            max_tokens,
            rng_seed,
        }
    }

    /// Lower-temperature settings used when answering an instruction.
    pub fn response_preset(max_tokens: usize, rng_seed: u64) -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.9,
            frequency_penalty: 0.0,
            presence_penalty: 1.0,
            repetition_penalty: 1.0,
            max_tokens,
            rng_seed,
        }
    }

    /// Plain ancestral sampling from the model distribution.
    pub fn neutral(max_tokens: usize, rng_seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            repetition_penalty: 1.0,
            max_tokens,
            rng_seed,
        }
    }

    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            ..Self::neutral(max_tokens, 0)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature < GREEDY_TEMPERATURE
    }
}

/// Steps 1 and 2 of the decoding pipeline: CTRL-style repetition penalty, then
/// additive frequency and presence penalties. `counts[t]` is how often token `t`
/// has been generated.
pub fn apply_penalties(logits: &mut [f64], counts: &[usize], params: &SamplingParams) {
    for (l, &n) in logits.iter_mut().zip(counts) {
        if n == 0 {
            continue;
        }
        if params.repetition_penalty != 1.0 {
            if *l > 0.0 {
                *l /= params.repetition_penalty;
            } else {
                *l *= params.repetition_penalty;
            }
        }
        *l -= params.frequency_penalty * n as f64 + params.presence_penalty;
    }
}

/// Temperature scaling and nucleus truncation of penalized logits. Returns a
/// probability vector over the full vocabulary (zeros outside the nucleus).
pub fn nucleus_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    if top_p >= 1.0 {
        return probs;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // descending probability, ties by id
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = order.len();
    for (rank, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= top_p {
            keep = rank + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    let kept_mass: f64 = order[..keep].iter().map(|&i| probs[i]).sum();
    for &i in &order[..keep] {
        out[i] = probs[i] / kept_mass;
    }
    out
}

fn argmax(v: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_nonzero
}

/// Distribution used for the next draw, given raw logits and the tokens
/// generated so far.
pub fn step_distribution(raw_logits: &[f64], counts: &[usize], params: &SamplingParams) -> Vec<f64> {
    let mut logits = raw_logits.to_vec();
    apply_penalties(&mut logits, counts, params);
    nucleus_distribution(&logits, params.temperature, params.top_p)
}

impl TinyLM {
    /// Autoregressive decoding after `prompt` until EOS, `max_tokens`, or the
    /// context limit. Returns only the generated tokens (EOS included when hit).
    pub fn sample(&self, prompt: &[TokenId], eos: TokenId, params: &SamplingParams) -> Result<Vec<TokenId>> {
        self.check_fits(prompt.len())?;
        let mut rng = rng_from_seed(params.rng_seed);
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        let mut counts = vec![0usize; self.config().vocab];
        while out.len() < params.max_tokens && seq.len() < self.config().context {
            let mut logits = self.next_token_logits(&seq)?;
            let tok = if params.is_greedy() {
                apply_penalties(&mut logits, &counts, params);
                argmax(&logits)
            } else {
                draw(&step_distribution(&logits, &counts, params), &mut rng)
            };
            out.push(tok);
            seq.push(tok);
            counts[tok] += 1;
            if tok == eos {
                break;
            }
        }
        Ok(out)
    }
}
