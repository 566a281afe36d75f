//! Dialog corpora: data model, text normalization, ingestion and splits.

mod ingest;
mod segment;
mod synth;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

pub use ingest::{ingest, parse_jsonl, write_jsonl, InputFormat};
pub use segment::{build_turns, drop_embedded_ipus, merge_ipus, remove_backchannels, segment};
pub use synth::{synth_corpus, Category, Exchange, SynthGrammar};

/// Characters deleted by [`normalize_text`].
pub const PUNCTUATION: [char; 6] = [',', '.', ':', ';', '!', '?'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Self {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        match label {
            "A" => Some(Speaker::A),
            "B" => Some(Speaker::B),
            _ => None,
        }
    }
}

/// A time-stamped stretch of speech from one speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct RawUtterance {
    pub speaker: Speaker,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

impl RawUtterance {
    pub fn new(speaker: Speaker, start_s: f64, end_s: f64, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || end_s <= start_s {
            return Err(Error::InvalidUtterance(format!("bad interval [{start_s}, {end_s}]")));
        }
        if text.trim().is_empty() {
            return Err(Error::InvalidUtterance("empty text".into()));
        }
        Ok(Self { speaker, start_s, end_s, text })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub speaker: Speaker,
    pub words: Vec<String>,
    /// Part-of-speech tags aligned with `words`, when the source supplied them.
    pub pos: Option<Vec<String>>,
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
}

impl Turn {
    pub fn new(speaker: Speaker, words: Vec<String>) -> Self {
        Self { speaker, words, pos: None, start_s: None, end_s: None }
    }

    pub fn tagged(speaker: Speaker, words: Vec<String>, pos: Vec<String>) -> Self {
        Self { speaker, words, pos: Some(pos), start_s: None, end_s: None }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Validates alternation, non-empty turns and tag alignment.
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        let id = id.into();
        if turns.is_empty() {
            return Err(Error::EmptyDialog);
        }
        for (i, t) in turns.iter().enumerate() {
            if t.words.is_empty() {
                return Err(Error::InvalidUtterance(format!("dialog {id}: turn {i} has no words")));
            }
            if t.pos.as_ref().is_some_and(|p| p.len() != t.words.len()) {
                return Err(Error::InvalidUtterance(format!("dialog {id}: turn {i} tags not aligned with words")));
            }
            if i > 0 && turns[i - 1].speaker == t.speaker {
                return Err(Error::InvalidUtterance(format!("dialog {id}: turns {} and {i} share a speaker", i - 1)));
            }
        }
        Ok(Self { id, turns })
    }

    pub fn num_words(&self) -> usize {
        self.turns.iter().map(|t| t.words.len()).sum()
    }

    pub fn is_tagged(&self) -> bool {
        self.turns.iter().all(|t| t.pos.is_some())
    }

    /// Consecutive turns `start..end`, keeping original speakers.
    pub fn window(&self, start: usize, end: usize) -> Dialog {
        Dialog { id: self.id.clone(), turns: self.turns[start..end].to_vec() }
    }
}

/// Merges consecutive same-speaker turns, joining their words.
pub fn merge_same_speaker(turns: Vec<Turn>) -> Vec<Turn> {
    let mut out: Vec<Turn> = Vec::with_capacity(turns.len());
    for t in turns {
        match out.last_mut() {
            Some(prev) if prev.speaker == t.speaker => {
                prev.words.extend(t.words);
                prev.pos = match (prev.pos.take(), t.pos) {
                    (Some(mut a), Some(b)) => {
                        a.extend(b);
                        Some(a)
                    }
                    _ => None,
                };
                prev.start_s = min_opt(prev.start_s, t.start_s);
                prev.end_s = max_opt(prev.end_s, t.end_s);
            }
            _ => out.push(t),
        }
    }
    out
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, y) => x.or(y),
    }
}

/// Lower-cases, deletes `, . : ; ! ?` and splits on whitespace.
pub fn normalize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !PUNCTUATION.contains(c)).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub backchannel_lexicon: BTreeSet<String>,
    pub isolation_gap_s: f64,
    pub ipu_gap_s: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        let lexicon = ["mm", "mhm", "uh-huh", "yeah", "right", "okay", "oh"];
        Self {
            backchannel_lexicon: lexicon.iter().map(|s| s.to_string()).collect(),
            isolation_gap_s: 1.0,
            ipu_gap_s: 0.5,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.isolation_gap_s > 0.0 && self.ipu_gap_s > 0.0) {
            return Err(Error::Config(format!(
                "segmentation gaps must be positive (isolation {}, ipu {})",
                self.isolation_gap_s, self.ipu_gap_s
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Dialog>,
    pub valid: Vec<Dialog>,
    pub test: Vec<Dialog>,
    pub seed: u64,
}

/// Splits whole dialogs after a seeded shuffle. Counts use largest-remainder
/// rounding of `ratios × n`; remainder ties go to the earlier part.
pub fn split(dialogs: &[Dialog], ratios: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    if dialogs.len() < 3 {
        return Err(Error::TooFewDialogs(dialogs.len()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(format!("{ratios:?} must be in [0, 1] and sum to 1")));
    }
    let counts = largest_remainder(dialogs.len(), &ratios);
    let mut order: Vec<usize> = (0..dialogs.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| dialogs[i].clone()).collect();
    Ok(CorpusSplit {
        train: take(0..counts[0]),
        valid: take(counts[0]..counts[0] + counts[1]),
        test: take(counts[0] + counts[1]..dialogs.len()),
        seed,
    })
}

fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn dialogs(n: usize) -> Vec<Dialog> {
        (0..n).map(|i| Dialog::new(format!("d{i}"), vec![Turn::new(Speaker::A, w("hi"))]).unwrap()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Hello, World!"), w("hello world"));
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("When? Now: yes."), w("when now yes"));
        assert!(normalize_text(" ?! ,").is_empty());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[a-zA-Z ,.:;!?'-]{0,40}") {
            let once = normalize_text(&s);
            let twice = normalize_text(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        let s = split(&dialogs(100), [0.9, 0.05, 0.05], 7).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (90, 5, 5));
        let s = split(&dialogs(20), [0.9, 0.05, 0.05], 7).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (18, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let ds = dialogs(37);
        let a = split(&ds, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(a, split(&ds, [0.8, 0.1, 0.1], 3).unwrap());
        let mut ids: Vec<String> =
            a.train.iter().chain(&a.valid).chain(&a.test).map(|d| d.id.clone()).collect();
        ids.sort();
        let mut want: Vec<String> = ds.iter().map(|d| d.id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
        let counts = [a.train.len() as f64, a.valid.len() as f64, a.test.len() as f64];
        for (c, r) in counts.iter().zip([0.8, 0.1, 0.1]) {
            assert!((c - r * 37.0).abs() <= 1.0);
        }
    }

    #[test]
    fn split_rejects_tiny_corpus() {
        assert!(matches!(split(&dialogs(2), [0.9, 0.05, 0.05], 1), Err(Error::TooFewDialogs(2))));
    }

    #[test]
    fn dialog_requires_alternation() {
        let t = |s| Turn::new(s, w("x"));
        assert!(Dialog::new("d", vec![t(Speaker::A), t(Speaker::A)]).is_err());
        assert!(Dialog::new("d", vec![]).is_err());
        assert!(Dialog::new("d", vec![t(Speaker::B), t(Speaker::A)]).is_ok());
    }
}
