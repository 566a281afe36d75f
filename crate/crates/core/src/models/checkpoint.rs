//! JSON checkpoints: config, vocabulary hash and parameters in declared order.
//!
//! Values are written as 64-bit floats; an f32 value widens exactly, so a
//! save/load roundtrip is bit-exact at either precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LstmClassifier, LstmConfig, PosBigramTable, TransformerConfig, TransformerLM};
use crate::numerics::{ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "turnlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Lstm,
    PosBigram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub precision: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub params: Vec<ParamRecord>,
}

fn records<T: Real>(p: &ParamStore<T>) -> Vec<ParamRecord> {
    p.names()
        .iter()
        .zip(p.tensors())
        .map(|(n, t)| ParamRecord { name: n.clone(), shape: t.shape().to_vec(), data: t.data().iter().map(|v| v.f64()).collect() })
        .collect()
}

impl Checkpoint {
    fn new<T: Real>(kind: ModelKind, config: serde_json::Value, vocab_hash: &str, params: Vec<ParamRecord>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind,
            precision: T::NAME.into(),
            config,
            vocab_hash: vocab_hash.into(),
            params,
        }
    }

    pub fn from_transformer<T: Real>(m: &TransformerLM<T>, vocab_hash: &str) -> Result<Self> {
        Ok(Self::new::<T>(ModelKind::Transformer, serde_json::to_value(&m.config)?, vocab_hash, records(&m.params)))
    }

    pub fn from_lstm<T: Real>(m: &LstmClassifier<T>, vocab_hash: &str) -> Result<Self> {
        Ok(Self::new::<T>(ModelKind::Lstm, serde_json::to_value(&m.config)?, vocab_hash, records(&m.params)))
    }

    pub fn from_pos(table: &PosBigramTable) -> Result<Self> {
        let config = serde_json::from_str(&table.to_json()?)?;
        Ok(Self::new::<f64>(ModelKind::PosBigram, config, "", Vec::new()))
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} does not match supported version {CHECKPOINT_VERSION}",
                self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("holds a {:?} model, expected {kind:?}", self.kind)));
        }
        Ok(())
    }

    fn store<T: Real>(&self) -> Result<ParamStore<T>> {
        let mut p = ParamStore::new();
        for r in &self.params {
            p.push(r.name.clone(), Tensor::new(&r.shape, r.data.iter().map(|&v| T::of(v)).collect())?);
        }
        Ok(p)
    }

    pub fn transformer<T: Real>(&self) -> Result<TransformerLM<T>> {
        self.expect(ModelKind::Transformer)?;
        let config: TransformerConfig = serde_json::from_value(self.config.clone())?;
        TransformerLM::from_params(config, self.store()?)
    }

    pub fn lstm<T: Real>(&self) -> Result<LstmClassifier<T>> {
        self.expect(ModelKind::Lstm)?;
        let config: LstmConfig = serde_json::from_value(self.config.clone())?;
        LstmClassifier::from_params(config, self.store()?)
    }

    pub fn pos(&self) -> Result<PosBigramTable> {
        self.expect(ModelKind::PosBigram)?;
        PosBigramTable::from_json(&self.config.to_string())
    }

    /// Errors unless the checkpoint was trained with the vocabulary `hash`.
    pub fn check_vocab(&self, hash: &str) -> Result<()> {
        if self.kind != ModelKind::PosBigram && self.vocab_hash != hash {
            return Err(Error::Checkpoint(format!("vocabulary hash {} does not match {hash}", self.vocab_hash)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TransformerConfig {
        TransformerConfig { n_layers: 1, n_heads: 2, d_model: 4, d_ff: 8, ctx_len: 6, vocab_size: 9, dropout_p: 0.0 }
    }

    #[test]
    fn roundtrip_is_bit_exact_f32() {
        let m = TransformerLM::<f32>::init(cfg(), 9).unwrap();
        let ck = Checkpoint::from_transformer(&m, "h").unwrap();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().transformer::<f32>().unwrap();
        assert_eq!(back, m);
        let (ids, spk) = ([2u32, 5, 3, 6], [1u8, 1, 2, 2]);
        assert_eq!(back.logits(&ids, &spk).unwrap(), m.logits(&ids, &spk).unwrap());
    }

    #[test]
    fn roundtrip_is_bit_exact_f64_lstm() {
        let m = LstmClassifier::<f64>::init(LstmConfig { vocab_size: 9, d_embed: 3, hidden: 4, n_layers: 2 }, 1).unwrap();
        let ck = Checkpoint::from_lstm(&m, "h").unwrap();
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().lstm::<f64>().unwrap(), m);
    }

    #[test]
    fn version_and_kind_mismatch_rejected() {
        let m = TransformerLM::<f32>::init(cfg(), 9).unwrap();
        let mut ck = Checkpoint::from_transformer(&m, "h").unwrap();
        assert!(ck.lstm::<f32>().is_err());
        ck.version = 99;
        assert!(ck.transformer::<f32>().unwrap_err().to_string().contains("version"));
        assert!(ck.check_vocab("other").is_err());
    }
}
