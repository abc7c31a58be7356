use serde::{Deserialize, Serialize};

use crate::langmodel::{LmError, TokenId, Vocab};

/// One synthesized (or grammar-drawn) data point: the few-shot prompt that
/// produced it, the instruction, and the response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub seed_id: u64,
    pub prompt: String,
    pub instruction: String,
    pub response: String,
}

impl Example {
    pub fn new(seed_id: u64, prompt: impl Into<String>, instruction: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            seed_id,
            prompt: prompt.into(),
            instruction: instruction.into(),
            response: response.into(),
        }
    }

    /// Grammar-drawn pair with no generating prompt.
    pub fn pair(instruction: impl Into<String>, response: impl Into<String>) -> Self {
        Self::new(0, "", instruction, response)
    }
}

/// Student-side token layout: `BOS instruction SEP response EOS`. Only the
/// response and EOS are prediction targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SftSample {
    pub ids: Vec<TokenId>,
    /// Index in `ids` of the first response token.
    pub response_start: usize,
}

impl SftSample {
    pub fn encode(vocab: &Vocab, instruction: &str, response: &str) -> Result<Self, LmError> {
        let mut ids = vec![vocab.bos()];
        ids.extend(vocab.encode(instruction)?);
        ids.push(vocab.sep());
        let response_start = ids.len();
        ids.extend(vocab.encode(response)?);
        ids.push(vocab.eos());
        Ok(Self { ids, response_start })
    }

    /// `prompt ++ continuation` with the loss on the continuation only.
    pub fn from_parts(prompt: Vec<TokenId>, continuation: Vec<TokenId>) -> Self {
        let response_start = prompt.len();
        let mut ids = prompt;
        ids.extend(continuation);
        Self { ids, response_start }
    }

    pub fn from_example(vocab: &Vocab, ex: &Example) -> Result<Self, LmError> {
        Self::encode(vocab, &ex.instruction, &ex.response)
    }

    /// Model input (all tokens but the last).
    pub fn input(&self) -> &[TokenId] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Next-token targets aligned with [`Self::input`].
    pub fn targets(&self) -> &[TokenId] {
        &self.ids[1..]
    }

    /// Loss mask aligned with [`Self::input`]: row `t` predicts `ids[t + 1]`.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len() - 1)
            .map(|t| t + 1 >= self.response_start)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Teacher-side context for a prompt text: `BOS prompt`.
pub fn prompt_ids(vocab: &Vocab, prompt: &str) -> Result<Vec<TokenId>, LmError> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.encode(prompt)?);
    Ok(ids)
}

/// Teacher-side continuation for a generated text: `text EOS`.
pub fn continuation_ids(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>, LmError> {
    let mut ids = vocab.encode(text)?;
    ids.push(vocab.eos());
    Ok(ids)
}

/// Prompt text under which the teacher writes a response to `instruction`.
/// Its token form matches the student layout up to the response.
pub fn response_prompt(instruction: &str) -> String {
    format!("{instruction}{}", Vocab::SEP)
}
