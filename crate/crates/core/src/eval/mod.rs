//! TRP extraction, balanced accuracy and threshold selection.

mod ablation;
mod scorers;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialog;
use crate::numerics::{softmax_into, Real, Tensor};
use crate::tokenizer::{TokenSeq, SPECIALS};
use crate::{Error, Result};

pub use ablation::{ablate_context, ablation_items, ablation_series, AblationItem, MIN_PRECEDING};
pub use scorers::{PosScorer, ShiftScorer};

/// A dialog with its encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub dialog: Dialog,
    pub seq: TokenSeq,
}

/// Per-row `max(P(speaker1), P(speaker2))` under a softmax of `logits`.
pub fn trp_probs<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let mut p = vec![T::zero(); logits.cols()];
    (0..logits.rows())
        .map(|r| {
            softmax_into(logits.row(r), &mut p);
            let (a, b) = (p[SPECIALS.speaker1_id as usize], p[SPECIALS.speaker2_id as usize]);
            a.max(b).f64()
        })
        .collect()
}

/// Scored positions pooled over dialogs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrpSeries {
    pub probs: Vec<f64>,
    pub labels: Vec<bool>,
    /// `(dialog id, token position)` of each entry.
    pub source: Vec<(String, usize)>,
}

impl TrpSeries {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn extend(&mut self, other: TrpSeries) {
        self.probs.extend(other.probs);
        self.labels.extend(other.labels);
        self.source.extend(other.source);
    }
}

/// Scores every dialog and keeps the `eval_mask` positions, in input order.
pub fn collect_series<S: ShiftScorer + ?Sized>(scorer: &S, items: &[Encoded]) -> Result<TrpSeries> {
    let parts: Vec<TrpSeries> = items
        .par_iter()
        .map(|e| {
            let p = scorer.shift_probs(&e.dialog, &e.seq)?;
            let mut s = TrpSeries::default();
            for t in (0..e.seq.len()).filter(|&t| e.seq.eval_mask[t]) {
                s.probs.push(p[t]);
                s.labels.push(e.seq.shift_label[t]);
                s.source.push((e.dialog.id.clone(), t));
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut out = TrpSeries::default();
    parts.into_iter().for_each(|p| out.extend(p));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bacc: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// Decision threshold, when predictions came from thresholding.
    pub threshold: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// `(TPR + TNR) / 2`. Values below 0.5 are possible for predictors worse than
/// chance.
pub fn balanced_accuracy(preds: &[bool], labels: &[bool]) -> Result<EvalReport> {
    if preds.len() != labels.len() {
        return Err(Error::Length(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::SingleClass);
    }
    let tpr = tp as f64 / (tp + fn_) as f64;
    let tnr = tn as f64 / (tn + fp) as f64;
    Ok(EvalReport { bacc: (tpr + tnr) / 2.0, tpr, tnr, threshold: None, tp, fp, tn, fn_ })
}

/// `{0.01, 0.02, …, 0.99}`
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Report at one threshold; a position is predicted positive when `prob > θ`.
pub fn report_at(series: &TrpSeries, threshold: f64) -> Result<EvalReport> {
    let preds: Vec<bool> = series.probs.iter().map(|&p| p > threshold).collect();
    let mut r = balanced_accuracy(&preds, &series.labels)?;
    r.threshold = Some(threshold);
    Ok(r)
}

/// The grid threshold with the highest bAcc; ties go to the lowest threshold.
pub fn sweep_threshold(series: &TrpSeries, grid: &[f64]) -> Result<(f64, EvalReport)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if let Some(&bad) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::BadThreshold(bad));
    }
    let mut best: Option<EvalReport> = None;
    for &t in grid {
        let r = report_at(series, t)?;
        let better = match &best {
            None => true,
            Some(b) => r.bacc > b.bacc || (r.bacc == b.bacc && t < b.threshold.unwrap_or(f64::INFINITY)),
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.expect("non-empty grid");
    Ok((best.threshold.expect("set by report_at"), best))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneOn {
    Test,
    #[default]
    Valid,
}

impl TuneOn {
    pub fn name(self) -> &'static str {
        match self {
            TuneOn::Test => "test",
            TuneOn::Valid => "valid",
        }
    }
}

/// Picks the threshold on `tune` (the test series itself under
/// [`TuneOn::Test`]) and reports bAcc on `test`.
pub fn evaluate_series(test: &TrpSeries, tune: Option<&TrpSeries>, grid: &[f64], tune_on: TuneOn) -> Result<EvalReport> {
    let tune = match tune_on {
        TuneOn::Test => test,
        TuneOn::Valid => tune.ok_or_else(|| Error::Config("threshold tuning on valid needs a validation set".into()))?,
    };
    let (theta, _) = sweep_threshold(tune, grid)?;
    report_at(test, theta)
}

/// Scores `test` (and `valid` when tuning on it) and reports test bAcc.
pub fn evaluate_model<S: ShiftScorer + ?Sized>(
    scorer: &S,
    test: &[Encoded],
    valid: Option<&[Encoded]>,
    grid: &[f64],
    tune_on: TuneOn,
) -> Result<EvalReport> {
    let test_series = collect_series(scorer, test)?;
    let valid_series = match (tune_on, valid) {
        (TuneOn::Valid, Some(v)) => Some(collect_series(scorer, v)?),
        _ => None,
    };
    evaluate_series(&test_series, valid_series.as_ref(), grid, tune_on)
}

/// One CSV/JSON result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub train_set: String,
    pub test_set: String,
    pub k: Option<usize>,
    pub tune_on: TuneOn,
    pub report: EvalReport,
}

pub const EVAL_CSV_HEADER: &str = "model,train_set,test_set,k,threshold,bacc,tpr,tnr,tune_on,tp,fp,tn,fn";

pub fn write_eval_csv<W: Write>(mut w: W, rows: &[EvalRow]) -> Result<()> {
    writeln!(w, "{EVAL_CSV_HEADER}")?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let th = r.report.threshold.map(|t| t.to_string()).unwrap_or_default();
        let e = &r.report;
        writeln!(
            w,
            "{},{},{},{k},{th},{},{},{},{},{},{},{},{}",
            r.model,
            r.train_set,
            r.test_set,
            e.bacc,
            e.tpr,
            e.tnr,
            r.tune_on.name(),
            e.tp,
            e.fp,
            e.tn,
            e.fn_
        )?;
    }
    Ok(())
}
