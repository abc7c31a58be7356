use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LmError, Result, TokenId};
use crate::numerics::{gemm, Graph, Segment, Tensor, Var};
use crate::rng::rng_from_seed;

/// Architecture of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 2,
            context: 64,
            vocab: 44,
        }
    }
}

/// Tensors per transformer block, in canonical order.
const PER_LAYER: usize = 12;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.context == 0 {
            return Err(LmError::Config("all dimensions must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(LmError::Config("vocabulary needs at least 2 symbols".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(LmError::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor in canonical order:
    /// token embedding, position embedding, then per block
    /// `ln1.gain, ln1.bias, attn.w_qkv, attn.b_qkv, attn.w_out, attn.b_out,
    /// ln2.gain, ln2.bias, mlp.w_in, mlp.b_in, mlp.w_out, mlp.b_out`,
    /// then final `ln.gain, ln.bias` and the vocabulary projection.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, v, c) = (self.dim, self.vocab, self.context);
        let mut s = vec![vec![v, d], vec![c, d]];
        for _ in 0..self.layers {
            s.extend([
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, 4 * d],
                vec![4 * d],
                vec![4 * d, d],
                vec![d],
            ]);
        }
        s.extend([vec![d], vec![d], vec![d, v]]);
        s
    }

    pub fn param_names(&self) -> Vec<String> {
        const BLOCK: [&str; PER_LAYER] = [
            "ln1.gain", "ln1.bias", "attn.w_qkv", "attn.b_qkv", "attn.w_out", "attn.b_out",
            "ln2.gain", "ln2.bias", "mlp.w_in", "mlp.b_in", "mlp.w_out", "mlp.b_out",
        ];
        let mut n = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.layers {
            n.extend(BLOCK.iter().map(|b| format!("block{l}.{b}")));
        }
        n.extend(["ln_f.gain".into(), "ln_f.bias".into(), "lm_head".into()]);
        n
    }

    /// Total scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Teacher,
    Student,
}

/// Tiny character-level decoder-only transformer (pre-LN, GELU MLP).
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    config: ModelConfig,
    role: ModelRole,
    params: Vec<Tensor>,
}

/// Handles produced by one packed forward pass.
pub struct Forward {
    /// `[total_rows, vocab]` logits.
    pub logits: Var,
    pub segments: Vec<Segment>,
    /// Parameter leaves in canonical order.
    pub params: Vec<Var>,
}

impl TinyLM {
    /// Normal(0, 0.02) weights; the two residual-branch output projections of
    /// each block use std `0.02 / sqrt(2 * layers)`. Gains start at 1, biases at 0.
    pub fn init(config: ModelConfig, role: ModelRole, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let resid_std = 0.02 / ((2 * config.layers) as f64).sqrt();
        let params = config
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(i, shape)| init_tensor(&config, i, shape, resid_std, &mut rng))
            .collect();
        Ok(Self {
            config,
            role,
            params,
        })
    }

    /// Every parameter zero; the logits are then identically zero.
    pub fn zeros(config: ModelConfig, role: ModelRole) -> Result<Self> {
        config.validate()?;
        let params = config.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            config,
            role,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, role: ModelRole, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(LmError::Config(
                "parameter shapes do not match the configuration".into(),
            ));
        }
        Ok(Self {
            config,
            role,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn with_role(mut self, role: ModelRole) -> Self {
        self.role = role;
        self
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn check_fits(&self, len: usize) -> Result<()> {
        if len > self.config.context {
            Err(LmError::Context {
                len,
                max: self.config.context,
            })
        } else {
            Ok(())
        }
    }

    fn final_hidden(&self, g: &mut Graph, seqs: &[&[TokenId]], trainable: bool) -> Result<(Var, Vec<Segment>, Vec<Var>)> {
        let cfg = &self.config;
        let mut segments = Vec::with_capacity(seqs.len());
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.is_empty() {
                return Err(LmError::EmptySequence);
            }
            self.check_fits(s.len())?;
            if let Some(&bad) = s.iter().find(|&&t| t >= cfg.vocab) {
                return Err(LmError::UnknownToken(bad));
            }
            segments.push(Segment {
                start: ids.len(),
                len: s.len(),
            });
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
        }
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let tok = g.embedding(p[0], &ids)?;
        let pe = g.embedding(p[1], &pos)?;
        let mut x = g.add(tok, pe)?;
        for l in 0..cfg.layers {
            let b = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let h = g.layer_norm(x, b[0], b[1])?;
            let qkv = g.matmul(h, b[2])?;
            let qkv = g.add_row(qkv, b[3])?;
            let a = g.causal_attention(qkv, cfg.heads, &segments)?;
            let a = g.matmul(a, b[4])?;
            let a = g.add_row(a, b[5])?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, b[6], b[7])?;
            let h = g.matmul(h, b[8])?;
            let h = g.add_row(h, b[9])?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, b[10])?;
            let h = g.add_row(h, b[11])?;
            x = g.add(x, h)?;
        }
        let n = p.len();
        let x = g.layer_norm(x, p[n - 3], p[n - 2])?;
        Ok((x, segments, p))
    }

    /// Packed forward over several sequences; rows of the returned logits are the
    /// concatenation of each sequence's positions.
    pub fn forward_packed(&self, g: &mut Graph, seqs: &[&[TokenId]], trainable: bool) -> Result<Forward> {
        let (x, segments, params) = self.final_hidden(g, seqs, trainable)?;
        let logits = g.matmul(x, params[params.len() - 1])?;
        Ok(Forward {
            logits,
            segments,
            params,
        })
    }

    /// `[T, vocab]` logits for one sequence.
    pub fn forward_logits(&self, ids: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward_packed(&mut g, &[ids], false)?;
        Ok(g.value(f.logits).clone())
    }

    /// Logits predicting the token after `ids`.
    pub fn next_token_logits(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (x, _, _) = self.final_hidden(&mut g, &[ids], false)?;
        let d = self.config.dim;
        let last = &g.value(x).data()[(ids.len() - 1) * d..ids.len() * d];
        let mut out = vec![0.0; self.config.vocab];
        gemm(
            1,
            d,
            self.config.vocab,
            last,
            false,
            self.params[self.params.len() - 1].data(),
            false,
            &mut out,
            0.0,
        );
        Ok(out)
    }

    /// Sum of `log p(token | preceding tokens)` over `continuation`, conditioned on
    /// `prompt`. Prompt tokens contribute no terms.
    pub fn sequence_log_prob(&self, prompt: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let lp = self.sequence_log_probs_graph(&mut g, &[(prompt, continuation)], false)?;
        Ok(g.value(lp.terms[0]).item()?)
    }

    /// Records the log-probabilities of several `(prompt, continuation)` pairs in
    /// one packed pass. Each pair yields one scalar node.
    pub fn sequence_log_probs_graph(
        &self,
        g: &mut Graph,
        pairs: &[(&[TokenId], &[TokenId])],
        trainable: bool,
    ) -> Result<SequenceLogProbs> {
        let mut seqs: Vec<Vec<TokenId>> = Vec::with_capacity(pairs.len());
        for (prompt, cont) in pairs {
            if cont.is_empty() {
                return Err(LmError::EmptyContinuation);
            }
            if prompt.is_empty() {
                return Err(LmError::EmptySequence);
            }
            self.check_fits(prompt.len() + cont.len())?;
            let mut s = Vec::with_capacity(prompt.len() + cont.len() - 1);
            s.extend_from_slice(prompt);
            s.extend_from_slice(&cont[..cont.len() - 1]);
            seqs.push(s);
        }
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        let fwd = self.forward_packed(g, &refs, trainable)?;
        let lp = g.log_softmax(fwd.logits)?;
        let mut terms = Vec::with_capacity(pairs.len());
        for ((prompt, cont), seg) in pairs.iter().zip(&fwd.segments) {
            let picks: Vec<(usize, usize)> = cont
                .iter()
                .enumerate()
                .map(|(i, &tok)| (seg.start + prompt.len() - 1 + i, tok))
                .collect();
            terms.push(g.pick_sum(lp, &picks)?);
        }
        Ok(SequenceLogProbs {
            terms,
            params: fwd.params,
        })
    }
}

pub struct SequenceLogProbs {
    pub terms: Vec<Var>,
    pub params: Vec<Var>,
}

fn init_tensor<R: Rng>(cfg: &ModelConfig, index: usize, shape: &[usize], resid_std: f64, rng: &mut R) -> Tensor {
    let total = 2 + cfg.layers * PER_LAYER + 3;
    let kind = if index < 2 {
        "weight"
    } else if index >= total - 3 {
        match index - (total - 3) {
            0 => "gain",
            1 => "bias",
            _ => "weight",
        }
    } else {
        match (index - 2) % PER_LAYER {
            0 | 6 => "gain",
            1 | 3 | 5 | 7 | 9 | 11 => "bias",
            4 | 10 => "resid",
            _ => "weight",
        }
    };
    match kind {
        "gain" => Tensor::full(shape, 1.0),
        "bias" => Tensor::zeros(shape),
        "resid" => Tensor::randn(shape, resid_std, rng),
        _ => Tensor::randn(shape, 0.02, rng),
    }
}
