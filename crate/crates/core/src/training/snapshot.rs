use super::{AdamWState, Trainable};
use crate::error::{Error, Result};
use crate::langmodel::sha256_hex;

/// A model together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<M> {
    pub model: M,
    pub opt: AdamWState,
}

impl<M: Trainable> TrainState<M> {
    /// Fresh optimizer state for `model`.
    pub fn new(model: M, weight_decay: f64) -> Self {
        let opt = AdamWState::new(model.params(), weight_decay);
        Self { model, opt }
    }

    /// Hash over parameters, moments and the step counter.
    pub fn content_hash(&self) -> String {
        let mut bytes = self.model.content_hash().into_bytes();
        bytes.extend(self.opt.to_bytes());
        sha256_hex(&bytes)
    }
}

/// Deep copy of a [`TrainState`]. Tensors are copy-on-write, so taking a
/// snapshot is cheap and later mutation of either side never leaks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot<M> {
    state: TrainState<M>,
}

impl<M: Trainable> ModelSnapshot<M> {
    pub fn state(&self) -> &TrainState<M> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<M> {
        self.state
    }

    pub fn model(&self) -> &M {
        &self.state.model
    }

    pub fn content_hash(&self) -> String {
        self.state.content_hash()
    }
}

pub fn snapshot<M: Trainable>(state: &TrainState<M>) -> ModelSnapshot<M> {
    ModelSnapshot { state: state.clone() }
}

/// Overwrites `state` with the snapshot. Fails when the architectures differ.
pub fn restore<M: Trainable>(state: &mut TrainState<M>, snap: &ModelSnapshot<M>) -> Result<()> {
    if !state.model.same_architecture(&snap.state.model) || !state.opt.matches(snap.state.model.params()) {
        return Err(Error::SnapshotMismatch("architecture differs from the captured model".into()));
    }
    *state = snap.state.clone();
    Ok(())
}
