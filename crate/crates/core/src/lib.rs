//! Question-type guided visual question answering.
//!
//! A question-type classifier supplies both a type feature that is fused with
//! every attention hypothesis and a predicted type distribution that, through
//! a type/answer co-occurrence prior, reweights the answer loss. Several
//! attention hypotheses are combined by a type-gated learnable mixer and the
//! whole graph is trained with a weighted multi-task loss.

pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod hypotheses;
pub mod interaction;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod prior;
pub mod trainer;

pub use error::{Error, Result};
