//! Where the model looks before predicting a turn shift: attention mass and
//! integrated gradients summed per turn over the five most recent turns.

mod attention;
mod ig;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{Encoded, ShiftScorer};
use crate::tokenizer::TokenSeq;
use crate::{rng, Error, Result};

pub use attention::{aggregate_attention, AttentionScope};
pub use ig::{integrate_gradients, integrated_gradients, IgBaseline, IgConfig, IgPath, IgResult, IgTarget, Quadrature};

/// Number of turns reported, current turn first.
pub const TURNS: usize = 5;

/// A true turn-shift position chosen for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    /// Index into the encoded dialogs passed to [`select_targets`].
    pub item: usize,
    pub dialog_id: String,
    pub position: usize,
    pub trp: f64,
}

impl Target {
    pub fn id(&self) -> String {
        format!("{}:{}", self.dialog_id, self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionKind {
    Attention,
    Ig,
}

impl AttributionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttributionKind::Attention => "attention",
            AttributionKind::Ig => "ig",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnAttribution {
    pub target: String,
    pub kind: AttributionKind,
    /// `values[o]` belongs to turn `t - o`.
    pub values: [f64; TURNS],
    /// Turns actually present in the model input (at most 5).
    pub available: usize,
    /// Fewer than five turns were available; missing slots hold 0.
    pub padded: bool,
}

/// Samples up to `n_dialogs` dialogs that have a true shift with TRP above
/// `trp_min`, then up to `per_dialog` such positions from each. The result is
/// ordered by dialog, then position.
pub fn select_targets<S: ShiftScorer + ?Sized>(
    scorer: &S,
    items: &[Encoded],
    trp_min: f64,
    n_dialogs: usize,
    per_dialog: usize,
    seed: u64,
) -> Result<Vec<Target>> {
    let candidates: Vec<Vec<Target>> = items
        .par_iter()
        .enumerate()
        .map(|(item, e)| {
            let p = scorer.shift_probs(&e.dialog, &e.seq)?;
            Ok((0..e.seq.len())
                .filter(|&t| e.seq.shift_label[t] && p[t] > trp_min)
                .map(|t| Target { item, dialog_id: e.dialog.id.clone(), position: t, trp: p[t] })
                .collect())
        })
        .collect::<Result<_>>()?;
    let total: usize = candidates.iter().map(Vec::len).sum();
    let mut dialogs: Vec<usize> = (0..items.len()).filter(|&i| !candidates[i].is_empty()).collect();
    if dialogs.is_empty() || n_dialogs == 0 || per_dialog == 0 {
        return Err(Error::NoTargets(format!(
            "{total} true shifts with TRP > {trp_min} in {} dialogs ({} dialogs x {} per dialog requested)",
            items.len(),
            n_dialogs,
            per_dialog
        )));
    }
    dialogs.shuffle(&mut rng::stream(seed, u64::MAX));
    dialogs.truncate(n_dialogs);
    dialogs.sort_unstable();
    let mut out = Vec::new();
    for d in dialogs {
        let mut picks = candidates[d].clone();
        picks.shuffle(&mut rng::stream(seed, d as u64));
        picks.truncate(per_dialog);
        picks.sort_by_key(|t| t.position);
        out.extend(picks);
    }
    Ok(out)
}

/// Model input for a target: the longest suffix ending at `position` that fits
/// `ctx_len` and starts at a turn boundary, or a plain `ctx_len` suffix when
/// the current turn alone is longer.
pub fn input_window(seq: &TokenSeq, position: usize, ctx_len: usize) -> std::ops::Range<usize> {
    let end = position + 1;
    let earliest = end.saturating_sub(ctx_len);
    let start = (earliest..end).find(|&i| seq.word_index[i].is_none()).unwrap_or(earliest);
    start..end
}

/// Sums `per_token` (aligned with `window`) into the five most recent turns
/// relative to the turn of the window's last token. Returns the sums and the
/// number of those turns present in the window.
pub(crate) fn turn_sums(seq: &TokenSeq, window: std::ops::Range<usize>, per_token: &[f64]) -> ([f64; TURNS], usize) {
    let current = seq.turn_index[window.end - 1];
    let first = seq.turn_index[window.start];
    let mut sums = [0.0; TURNS];
    for (i, &v) in window.clone().zip(per_token) {
        let offset = (current - seq.turn_index[i]) as usize;
        if offset < TURNS {
            sums[offset] += v;
        }
    }
    let available = ((current - first) as usize + 1).min(TURNS);
    (sums, available)
}

pub const ATTRIBUTION_CSV_HEADER: &str = "target_id,turn_offset,value,kind";

pub fn write_attribution_csv<W: Write>(mut w: W, rows: &[TurnAttribution]) -> Result<()> {
    writeln!(w, "{ATTRIBUTION_CSV_HEADER}")?;
    for r in rows {
        for (o, v) in r.values.iter().enumerate() {
            writeln!(w, "{},{},{},{}", r.target, -(o as i64), v, r.kind.name())?;
        }
    }
    Ok(())
}
