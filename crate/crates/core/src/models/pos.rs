//! Turn-shift probabilities from part-of-speech bigrams.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialog;
use crate::{Error, Result};

/// Predecessor tag of a turn's first word.
pub const BOS_TAG: &str = "<bos>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigramCount {
    pub n_total: u64,
    pub n_shift: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosBigramTable {
    pub counts: BTreeMap<(String, String), BigramCount>,
    pub alpha: f64,
    /// Shift rate over all counted words.
    pub prior: f64,
}

#[derive(Serialize, Deserialize)]
struct Row {
    prev: String,
    cur: String,
    n_total: u64,
    n_shift: u64,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    alpha: f64,
    prior: f64,
    bigrams: Vec<Row>,
}

/// Counts `(previous tag, tag)` occurrences and how many of them end a turn
/// that is followed by another turn. The last word of a dialog is skipped:
/// nothing follows it.
pub fn fit_pos_bigram(dialogs: &[Dialog], alpha: f64) -> Result<PosBigramTable> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha {alpha} must be finite and non-negative")));
    }
    let mut counts: BTreeMap<(String, String), BigramCount> = BTreeMap::new();
    let (mut words, mut shifts) = (0u64, 0u64);
    for d in dialogs {
        for (ti, turn) in d.turns.iter().enumerate() {
            let tags = turn.pos.as_ref().ok_or_else(|| Error::MissingTags(d.id.clone()))?;
            let last_turn = ti + 1 == d.turns.len();
            for wi in 0..tags.len() {
                let end = wi + 1 == tags.len();
                if last_turn && end {
                    continue;
                }
                let prev = if wi == 0 { BOS_TAG } else { tags[wi - 1].as_str() };
                let c = counts.entry((prev.to_string(), tags[wi].clone())).or_default();
                c.n_total += 1;
                words += 1;
                if end {
                    c.n_shift += 1;
                    shifts += 1;
                }
            }
        }
    }
    let prior = if words == 0 { 0.0 } else { shifts as f64 / words as f64 };
    Ok(PosBigramTable { counts, alpha, prior })
}

impl PosBigramTable {
    pub fn prob(&self, prev: &str, cur: &str) -> f64 {
        match self.counts.get(&(prev.to_string(), cur.to_string())) {
            Some(c) => (c.n_shift as f64 + self.alpha) / (c.n_total as f64 + 2.0 * self.alpha),
            None => self.prior,
        }
    }

    /// Shift probability after each word of one turn's tag sequence.
    pub fn predict(&self, tags: &[String]) -> Vec<f64> {
        (0..tags.len())
            .map(|t| self.prob(if t == 0 { BOS_TAG } else { &tags[t - 1] }, &tags[t]))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let bigrams = self
            .counts
            .iter()
            .map(|((p, c), n)| Row { prev: p.clone(), cur: c.clone(), n_total: n.n_total, n_shift: n.n_shift })
            .collect();
        Ok(serde_json::to_string_pretty(&TableFile { alpha: self.alpha, prior: self.prior, bigrams })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: TableFile = serde_json::from_str(s)?;
        let mut counts = BTreeMap::new();
        for r in f.bigrams {
            if r.n_shift > r.n_total {
                return Err(Error::Checkpoint(format!("bigram ({}, {}) has more shifts than counts", r.prev, r.cur)));
            }
            counts.insert((r.prev, r.cur), BigramCount { n_total: r.n_total, n_shift: r.n_shift });
        }
        Ok(Self { counts, alpha: f.alpha, prior: f.prior })
    }
}
