//! Desk-scale toolkit for pretraining a monolingual BERT-style encoder:
//! BPE tokenization with merge dropout, cross-tokenizer embedding transfer
//! for warm starts, whole-word MLM plus sentence-structure objectives,
//! schedule-driven Adam training and an ablation statistics harness.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalstats;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Real, Tensor};
