//! Student-preference-guided synthetic data generation at desk scale.
//!
//! A teacher language model writes instructions and responses; a student is
//! trained on them. Each candidate example is scored by its local influence on
//! the student (the drop in reference loss after one optimizer step on it),
//! and the teacher is tuned with DPO to prefer high-influence instructions.

pub mod influence;
pub mod langmodel;
pub mod numerics;
pub mod pipeline;
pub mod preference;
pub mod rng;
pub mod synthesis;
pub mod training;

mod error;
mod example;

pub use error::{Error, Result};
pub use example::{Example, SftSample};
