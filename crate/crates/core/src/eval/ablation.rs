//! Scoring turns with a limited number of preceding turns.

use rayon::prelude::*;

use super::{evaluate_series, EvalReport, ShiftScorer, TrpSeries, TuneOn};
use crate::corpus::Dialog;
use crate::tokenizer::{encode_dialog, encode_turns, TokenSeq, Vocab};
use crate::{Error, Result};

/// Turns need this many predecessors to be scored, so every `k` up to it
/// sees the same set of positions.
pub const MIN_PRECEDING: usize = 4;

/// Turn `turn` of a dialog re-encoded with its `k` preceding turns.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationItem {
    pub dialog: Dialog,
    pub seq: TokenSeq,
    /// Scored positions in `seq` (the current turn's words).
    pub positions: Vec<usize>,
    /// Labels taken from the full dialog's encoding.
    pub labels: Vec<bool>,
    pub source: Vec<(String, usize)>,
}

/// Items for every qualifying turn of `dialogs`. Speaker slots keep their
/// parity from the full dialog and positions restart at 0.
pub fn ablation_items(dialogs: &[Dialog], vocab: &Vocab, k: usize) -> Result<Vec<AblationItem>> {
    if k > MIN_PRECEDING {
        return Err(Error::Config(format!("context size {k} exceeds {MIN_PRECEDING}")));
    }
    let mut items = Vec::new();
    for d in dialogs {
        if d.turns.len() <= MIN_PRECEDING {
            continue;
        }
        let full = encode_dialog(d, vocab)?;
        for j in MIN_PRECEDING..d.turns.len() {
            let window = d.window(j - k, j + 1);
            let slot = if (j - k) % 2 == 0 { 1 } else { 2 };
            let seq = encode_turns(&window.turns, slot, vocab)?;
            let original: Vec<usize> =
                (0..full.len()).filter(|&t| full.turn_index[t] == j as u32 && full.word_index[t].is_some()).collect();
            let local: Vec<usize> =
                (0..seq.len()).filter(|&t| seq.turn_index[t] == k as u32 && seq.word_index[t].is_some()).collect();
            debug_assert_eq!(original.len(), local.len());
            let (mut positions, mut labels, mut source) = (Vec::new(), Vec::new(), Vec::new());
            for (&o, &l) in original.iter().zip(&local) {
                if full.eval_mask[o] {
                    positions.push(l);
                    labels.push(full.shift_label[o]);
                    source.push((d.id.clone(), o));
                }
            }
            items.push(AblationItem { dialog: window, seq, positions, labels, source });
        }
    }
    Ok(items)
}

/// Pooled scores of all qualifying turns at context size `k`.
pub fn ablation_series<S: ShiftScorer + ?Sized>(scorer: &S, dialogs: &[Dialog], vocab: &Vocab, k: usize) -> Result<TrpSeries> {
    let items = ablation_items(dialogs, vocab, k)?;
    if items.is_empty() {
        return Err(Error::NoQualifyingTurns(format!(
            "no turn among {} dialogs has {MIN_PRECEDING} preceding turns",
            dialogs.len()
        )));
    }
    let parts: Vec<TrpSeries> = items
        .par_iter()
        .map(|it| {
            let p = scorer.shift_probs(&it.dialog, &it.seq)?;
            Ok(TrpSeries {
                probs: it.positions.iter().map(|&t| p[t]).collect(),
                labels: it.labels.clone(),
                source: it.source.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut out = TrpSeries::default();
    parts.into_iter().for_each(|p| out.extend(p));
    Ok(out)
}

/// bAcc per context size, with the threshold re-selected for each `k`.
pub fn ablate_context<S: ShiftScorer + ?Sized>(
    scorer: &S,
    test: &[Dialog],
    valid: Option<&[Dialog]>,
    vocab: &Vocab,
    ks: &[usize],
    grid: &[f64],
    tune_on: TuneOn,
) -> Result<Vec<(usize, EvalReport)>> {
    ks.iter()
        .map(|&k| {
            let series = ablation_series(scorer, test, vocab, k)?;
            let tune = match (tune_on, valid) {
                (TuneOn::Valid, Some(v)) => Some(ablation_series(scorer, v, vocab, k)?),
                _ => None,
            };
            Ok((k, evaluate_series(&series, tune.as_ref(), grid, tune_on)?))
        })
        .collect()
}
