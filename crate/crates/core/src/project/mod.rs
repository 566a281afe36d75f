//! How many more tokens until the model hands the turn over: nucleus-sampled
//! rollouts from a mid-turn prefix, histogrammed by length.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::{Session, TransformerLM};
use crate::numerics::{softmax_into, Real};
use crate::tokenizer::{TokenSeq, SPECIALS};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub nucleus_p: f64,
    pub max_len: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Keep the token that crosses `nucleus_p` (the usual top-p rule).
    pub inclusive: bool,
    /// Number of rollouts whose tokens are kept for inspection.
    pub keep_samples: usize,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig { nucleus_p: 0.9, max_len: 50, n_samples: 1000, seed: 0, inclusive: false, keep_samples: 0 }
    }
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Config(format!("nucleus_p must be in (0, 1], got {}", self.nucleus_p)));
        }
        if self.max_len == 0 || self.n_samples == 0 {
            return Err(Error::Config("max_len and n_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnLengthHistogram {
    pub prefix_id: String,
    /// `counts[n]` for `n < max_len`: rollouts that produced a speaker token
    /// after exactly `n` other tokens. `counts[max_len]`: censored rollouts.
    pub counts: Vec<u64>,
    /// The prefix, or a rollout, was cut from the left to fit the context.
    pub truncated: bool,
    /// Generated tokens of the first `keep_samples` rollouts, speaker token
    /// included when one was drawn.
    pub samples: Vec<Vec<u32>>,
}

impl TurnLengthHistogram {
    pub fn max_len(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn censored(&self) -> u64 {
        self.counts[self.max_len()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Tokens sorted by probability (ties by id), cut to the longest prefix whose
/// mass is at most `p` (or, with `inclusive`, the shortest reaching `p`),
/// never empty, renormalized. `p = 1` returns the input unchanged. Returns
/// `(token id, probability)` pairs.
pub fn nucleus_filter(probs: &[f64], p: f64, inclusive: bool) -> Vec<(u32, f64)> {
    let mut order: Vec<(u32, f64)> = probs.iter().enumerate().filter(|(_, &q)| q > 0.0).map(|(i, &q)| (i as u32, q)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if p >= 1.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut keep = 0;
    for &(_, q) in &order {
        if inclusive {
            keep += 1;
            cum += q;
            if cum >= p {
                break;
            }
        } else {
            if cum + q > p {
                break;
            }
            cum += q;
            keep += 1;
        }
    }
    order.truncate(keep.max(1));
    let total: f64 = order.iter().map(|x| x.1).sum();
    order.iter_mut().for_each(|x| x.1 /= total);
    order
}

/// Draws a token with probability proportional to its weight.
pub fn sample_token<R: Rng + ?Sized>(dist: &[(u32, f64)], rng: &mut R) -> u32 {
    let total: f64 = dist.iter().map(|x| x.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(id, q) in dist {
        if u < q {
            return id;
        }
        u -= q;
    }
    dist.last().expect("empty distribution").0
}

/// A model that can be fed one token at a time.
pub trait Autoregressive: Sync {
    type State<'a>: Clone + Send + Sync
    where
        Self: 'a;

    fn ctx_len(&self) -> usize;

    fn begin(&self) -> Self::State<'_>;

    /// Feeds a token and returns the next-token distribution.
    fn feed(&self, state: &mut Self::State<'_>, id: u32, speaker: u8) -> Result<Vec<f64>>;
}

impl<T: Real> Autoregressive for TransformerLM<T> {
    type State<'a> = Session<'a, T>;

    fn ctx_len(&self) -> usize {
        self.config.ctx_len
    }

    fn begin(&self) -> Session<'_, T> {
        self.session()
    }

    fn feed(&self, state: &mut Session<'_, T>, id: u32, speaker: u8) -> Result<Vec<f64>> {
        let logits = state.step(id, speaker)?;
        let mut p = vec![T::zero(); logits.len()];
        softmax_into(&logits, &mut p);
        Ok(p.iter().map(|x| x.f64()).collect())
    }
}

fn is_speaker(id: u32) -> bool {
    id == SPECIALS.speaker1_id || id == SPECIALS.speaker2_id
}

/// Start of the longest suffix of `ids` with at most `room` tokens, moved
/// forward to a turn boundary when one exists inside it.
fn cut(ids: &[u32], room: usize) -> usize {
    let earliest = ids.len().saturating_sub(room);
    (earliest..ids.len()).find(|&i| is_speaker(ids[i])).unwrap_or(earliest)
}

struct Rollout<'m, M: Autoregressive + 'm> {
    model: &'m M,
    state: M::State<'m>,
    ids: Vec<u32>,
    speakers: Vec<u8>,
    fed: usize,
    truncated: bool,
}

impl<'m, M: Autoregressive> Rollout<'m, M> {
    /// Re-primes the state from a left-truncated copy of the sequence so far.
    fn refill(&mut self, room: usize) -> Result<Vec<f64>> {
        let start = cut(&self.ids, room);
        self.truncated |= start > 0;
        self.state = self.model.begin();
        self.fed = 0;
        let mut probs = Vec::new();
        for i in start..self.ids.len() {
            probs = self.model.feed(&mut self.state, self.ids[i], self.speakers[i])?;
            self.fed += 1;
        }
        Ok(probs)
    }

    fn push(&mut self, id: u32, speaker: u8) -> Result<Vec<f64>> {
        self.ids.push(id);
        self.speakers.push(speaker);
        if self.fed == self.model.ctx_len() {
            return self.refill(self.model.ctx_len() / 2);
        }
        self.fed += 1;
        self.model.feed(&mut self.state, id, speaker)
    }
}

/// Samples `n_samples` continuations of a mid-turn prefix and counts the
/// tokens generated before the first speaker token. Rollout `r` draws from
/// `rng::stream(seed, r)`; generated tokens keep the prefix's last speaker id.
pub fn project_turn_end<M: Autoregressive>(
    model: &M,
    prefix_id: &str,
    prefix: &TokenSeq,
    cfg: &ProjectConfig,
) -> Result<TurnLengthHistogram> {
    cfg.validate()?;
    match prefix.ids.last() {
        None => return Err(Error::Length("empty prefix".into())),
        Some(&id) if is_speaker(id) => return Err(Error::PrefixAtTurnStart),
        _ => {}
    }
    let speaker = *prefix.speaker_ids.last().expect("non-empty");
    let mut primed = Rollout { model, state: model.begin(), ids: prefix.ids.clone(), speakers: prefix.speaker_ids.clone(), fed: 0, truncated: false };
    let first = primed.refill(model.ctx_len())?;

    let outcomes: Vec<(usize, bool, Vec<u32>)> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, r as u64);
            let mut roll = Rollout { model, state: primed.state.clone(), ids: primed.ids.clone(), speakers: primed.speakers.clone(), fed: primed.fed, truncated: primed.truncated };
            let keep = r < cfg.keep_samples;
            let mut generated = Vec::new();
            let mut probs = first.clone();
            for n in 0..cfg.max_len {
                let id = sample_token(&nucleus_filter(&probs, cfg.nucleus_p, cfg.inclusive), &mut rng);
                if keep {
                    generated.push(id);
                }
                if is_speaker(id) {
                    return Ok((n, roll.truncated, generated));
                }
                if n + 1 < cfg.max_len {
                    probs = roll.push(id, speaker)?;
                }
            }
            Ok((cfg.max_len, roll.truncated, generated))
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![0u64; cfg.max_len + 1];
    let mut truncated = primed.truncated;
    let mut samples = Vec::new();
    for (n, t, g) in outcomes {
        counts[n] += 1;
        truncated |= t;
        if !g.is_empty() {
            samples.push(g);
        }
    }
    Ok(TurnLengthHistogram { prefix_id: prefix_id.to_string(), counts, truncated, samples })
}

pub const HISTOGRAM_CSV_HEADER: &str = "prefix_id,bucket,count";

/// One row per bucket; the censored bucket is labelled `>=max_len`.
pub fn write_histogram_csv<W: Write>(mut w: W, hists: &[TurnLengthHistogram]) -> Result<()> {
    writeln!(w, "{HISTOGRAM_CSV_HEADER}")?;
    for h in hists {
        for (b, c) in h.counts.iter().enumerate() {
            if b == h.max_len() {
                writeln!(w, "{},>={},{}", h.prefix_id, b, c)?;
            } else {
                writeln!(w, "{},{},{}", h.prefix_id, b, c)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TransformerConfig;
    use proptest::prelude::*;

    #[test]
    fn nucleus_hand_example() {
        let f = nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.9, false);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].0, 0);
        assert_eq!(f[1].0, 1);
        assert!((f[0].1 - 0.625).abs() < 1e-12);
        assert!((f[1].1 - 0.375).abs() < 1e-12);
        // the usual rule keeps the crossing token
        assert_eq!(nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.9, true).len(), 3);
    }

    #[test]
    fn nucleus_edge_cases() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let all = nucleus_filter(&probs, 1.0, false);
        assert_eq!(all.len(), 4);
        for (id, q) in all {
            assert_eq!(q, probs[id as usize]);
        }
        assert_eq!(nucleus_filter(&[0.95, 0.05], 0.9, false), vec![(0, 1.0)]);
        // equal probabilities: lower id first
        assert_eq!(nucleus_filter(&[0.25, 0.25, 0.5], 0.75, false), vec![(2, 0.5 / 0.75), (0, 0.25 / 0.75)]);
    }

    proptest! {
        #[test]
        fn nucleus_is_a_distribution_on_the_support(raw in prop::collection::vec(0.0f64..1.0, 1..30), p in 0.01f64..1.0) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let f = nucleus_filter(&probs, p, false);
            prop_assert!((f.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(f.iter().all(|&(id, q)| q >= 0.0 && probs[id as usize] > 0.0));
            prop_assert!(nucleus_filter(&probs, 0.5, false).len() <= nucleus_filter(&probs, 0.9, false).len());
        }
    }

    #[test]
    fn sampler_frequencies() {
        let dist = [(0, 0.625), (1, 0.375)];
        let mut r = rng::seeded(11);
        let n = 10_000;
        let hits = (0..n).filter(|_| sample_token(&dist, &mut r) == 0).count() as f64 / n as f64;
        let sigma = (0.625f64 * 0.375 / n as f64).sqrt();
        assert!((hits - 0.625).abs() <= 3.0 * sigma, "{hits}");
        assert_eq!(sample_token(&[(7, 1.0)], &mut r), 7);
        let draws = |seed| {
            let mut r = rng::seeded(seed);
            (0..64).map(|_| sample_token(&dist, &mut r)).collect::<Vec<_>>()
        };
        assert_ne!(draws(1), draws(2));
    }

    /// Emits `next` with certainty after every token.
    struct Forced {
        next: u32,
        vocab: usize,
    }

    impl Autoregressive for Forced {
        type State<'a> = usize;

        fn ctx_len(&self) -> usize {
            8
        }

        fn begin(&self) -> usize {
            0
        }

        fn feed(&self, state: &mut usize, _: u32, _: u8) -> Result<Vec<f64>> {
            assert!(*state < 8, "context overflow");
            *state += 1;
            let mut p = vec![0.0; self.vocab];
            p[self.next as usize] = 1.0;
            Ok(p)
        }
    }

    fn prefix(ids: Vec<u32>) -> TokenSeq {
        let n = ids.len();
        TokenSeq {
            word_index: ids.iter().map(|&i| if is_speaker(i) { None } else { Some(0) }).collect(),
            ids,
            speaker_ids: vec![1; n],
            shift_label: vec![false; n],
            eval_mask: vec![true; n],
            turn_index: vec![0; n],
        }
    }

    #[test]
    fn forced_speaker_goes_to_bucket_zero() {
        let cfg = ProjectConfig { n_samples: 50, max_len: 10, ..Default::default() };
        let h = project_turn_end(&Forced { next: SPECIALS.speaker2_id, vocab: 10 }, "p", &prefix(vec![2, 5, 6]), &cfg).unwrap();
        assert_eq!(h.counts[0], 50);
        assert_eq!(h.total(), 50);
    }

    #[test]
    fn never_speaking_is_censored() {
        let cfg = ProjectConfig { n_samples: 40, max_len: 20, keep_samples: 2, ..Default::default() };
        let h = project_turn_end(&Forced { next: 7, vocab: 10 }, "p", &prefix(vec![2, 5, 6, 3, 5, 6, 5]), &cfg).unwrap();
        assert_eq!(h.censored(), 40);
        assert_eq!(h.total(), 40);
        assert!(h.truncated);
        assert_eq!(h.samples, vec![vec![7; 20]; 2]);
    }

    #[test]
    fn prefix_must_end_mid_turn() {
        let cfg = ProjectConfig::default();
        let m = Forced { next: 7, vocab: 10 };
        assert!(matches!(project_turn_end(&m, "p", &prefix(vec![2, 5, 3]), &cfg), Err(Error::PrefixAtTurnStart)));
        assert!(project_turn_end(&m, "p", &prefix(vec![]), &cfg).is_err());
    }

    #[test]
    fn long_prefix_cut_at_turn() {
        assert_eq!(cut(&[2, 5, 5, 3, 5, 5, 5], 5), 3);
        assert_eq!(cut(&[2, 5, 5, 5, 5, 5, 5], 3), 4);
        assert_eq!(cut(&[2, 5], 8), 0);
    }

    #[test]
    fn transformer_rollouts_are_seeded() {
        let c = TransformerConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, ctx_len: 16, vocab_size: 12, dropout_p: 0.0 };
        let m = TransformerLM::<f64>::init(c, 3).unwrap();
        let cfg = ProjectConfig { n_samples: 30, max_len: 20, seed: 4, ..Default::default() };
        let p = prefix(vec![2, 5, 6, 7]);
        let a = project_turn_end(&m, "p", &p, &cfg).unwrap();
        assert_eq!(a, project_turn_end(&m, "p", &p, &cfg).unwrap());
        assert_eq!(a.total(), 30);
        let b = project_turn_end(&m, "p", &p, &ProjectConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.counts, b.counts);
    }

    #[test]
    fn csv_has_censored_bucket() {
        let h = TurnLengthHistogram { prefix_id: "x".into(), counts: vec![1, 0, 2], truncated: false, samples: vec![] };
        let mut out = Vec::new();
        write_histogram_csv(&mut out, &[h]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "prefix_id,bucket,count\nx,0,1\nx,1,0\nx,>=2,2\n");
    }
}
