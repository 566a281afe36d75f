//! Turn-shift prediction laboratory.
//!
//! Dialogs are serialized with one speaker token in front of every turn, so a
//! language model trained on them assigns a probability to "the next token
//! opens a new turn" at every word. That probability is the transition-relevance
//! score compared against a POS-bigram table and an LSTM classifier.
//!
//! Layout follows the pipeline:
//!
//! * [`corpus`]: ingestion, segmentation of timed transcripts, splits, synthetic data
//! * [`tokenizer`]: BPE vocabulary and dialog encoding
//! * [`numerics`]: tensors, reverse-mode tape, AdamW
//! * [`models`]: transformer LM, LSTM classifier, POS-bigram table, checkpoints
//! * [`training`]: training loops with validation-based selection
//! * [`eval`]: TRP extraction, balanced accuracy, threshold sweeps, context ablation
//! * [`inspect`]: attention aggregation and integrated gradients
//! * [`project`]: nucleus-sampled turn-length projection

pub mod corpus;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod models;
pub mod numerics;
pub mod project;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
