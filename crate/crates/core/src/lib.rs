//! Desk-scale cross-lingual transfer learning for offensive-language
//! classification: a tiny transformer trained from scratch with its own
//! autodiff, a shared BPE vocabulary, checkpoint-based transfer between tasks,
//! and shared-task style evaluation.

pub mod datasets;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
