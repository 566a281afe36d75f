//! The three shift predictors and their checkpoint format.

mod checkpoint;
mod lstm;
mod pos;
mod transformer;

pub use checkpoint::{Checkpoint, ModelKind, ParamRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use lstm::{LstmClassifier, LstmConfig};
pub use pos::{fit_pos_bigram, BigramCount, PosBigramTable, BOS_TAG};
pub use transformer::{LmForward, Session, TransformerConfig, TransformerLM};
