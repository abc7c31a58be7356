use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// AdamW moments and step counter for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Hyperparameters that can be set from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub weight_decay: f64,
}

impl AdamWState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Same hyperparameters, zeroed moments, `t = 0`.
    pub fn reset(&self) -> Self {
        Self {
            t: 0,
            m: self.m.iter().map(|m| Tensor::zeros(m.shape())).collect(),
            v: self.v.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            ..*self
        }
    }

    /// Whether the moment buffers match `params` shape for shape.
    pub fn matches(&self, params: &[Tensor]) -> bool {
        self.m.len() == params.len() && self.m.iter().zip(params).all(|(m, p)| m.shape() == p.shape())
    }

    /// One AdamW update. Weight decay is decoupled and applied first
    /// (`θ ← θ − lr·wd·θ`), then the bias-corrected Adam step. `grads` is
    /// drained; an empty list means no backward pass has run.
    pub fn step(&mut self, params: &mut [Tensor], grads: &mut Vec<Tensor>, lr: f64) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::MissingGradients);
        }
        if grads.len() != params.len() || !self.matches(params) {
            return Err(Error::Config(format!(
                "optimizer holds {} buffers, model has {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            if g.shape() != p.shape() {
                return Err(Error::Config(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                if wd != 0.0 {
                    pd[i] -= lr * wd * pd[i];
                }
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        grads.clear();
        Ok(())
    }

    /// Little-endian serialization of the counter and both moment buffers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for x in [self.beta1, self.beta2, self.eps, self.weight_decay] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.t.to_le_bytes());
        for t in self.m.iter().chain(&self.v) {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`Self::to_bytes`] for a model with parameters shaped like `params`.
    pub fn from_bytes(bytes: &[u8], params: &[Tensor]) -> Result<Self> {
        let n: usize = params.iter().map(Tensor::len).sum();
        let expected = 5 * 8 + 16 * n;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!(
                "optimizer state has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let word = |i: usize| bytes[8 * i..8 * i + 8].try_into().expect("8-byte slice");
        let f = |i: usize| f64::from_le_bytes(word(i));
        let mut state = Self::new(params, f(3));
        state.beta1 = f(0);
        state.beta2 = f(1);
        state.eps = f(2);
        state.t = u64::from_le_bytes(word(4));
        let mut at = 5;
        for t in state.m.iter_mut().chain(state.v.iter_mut()) {
            for x in t.data_mut() {
                *x = f(at);
                at += 1;
            }
        }
        Ok(state)
    }
}
