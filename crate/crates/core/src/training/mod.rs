//! Training loops with validation-based model selection.
//!
//! A batch is a list of examples, each with its own tape. Per-example losses
//! are weighted means over counted targets; the batch gradient weights them
//! by target count, so it equals the gradient of the mean over all targets in
//! the batch. Examples are reduced in batch order, which keeps runs
//! reproducible under any thread count.

mod window;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::{LstmClassifier, TransformerLM};
use crate::numerics::{clip_global_norm, AdamW, AdamWConfig, ParamStore, Precision, Real, Tape};
use crate::tokenizer::TokenSeq;
use crate::{rng, Error, Result};

pub use window::{window_dialogs, Window};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero at `max_steps`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dropout: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    /// Window stride for sequences longer than the context; half the context when unset.
    pub stride: Option<usize>,
    /// Drop speaker-token targets from the language-model loss.
    pub exclude_speaker_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            batch_size: 8,
            max_steps: 1000,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            dropout: 0.1,
            eval_every: 50,
            seed: 0,
            precision: Precision::F32,
            grad_clip: 1.0,
            lr_schedule: LrSchedule::Constant,
            stride: None,
            exclude_speaker_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, max_steps and eval_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub best_step: usize,
}

impl TrainLog {
    pub fn best_valid_loss(&self) -> Option<f64> {
        self.records.iter().find(|r| r.step == self.best_step).map(|r| r.valid_loss)
    }

    /// `step,train_loss,valid_loss` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,train_loss,valid_loss")?;
        for r in &self.records {
            writeln!(w, "{},{},{}", r.step, r.train_loss, r.valid_loss)?;
        }
        Ok(())
    }
}

/// One training sequence: inputs plus a per-position weight on its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub speaker_ids: Vec<u8>,
    /// Next-token targets for the language model, shift labels for the classifier.
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Example {
    fn weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Language-model examples: windows of every sequence, with overlapped and
/// final targets masked.
pub fn lm_examples(seqs: &[TokenSeq], ctx_len: usize, stride: usize, exclude_speaker_targets: bool) -> Result<Vec<Example>> {
    let windows = window_dialogs(seqs, ctx_len, stride)?;
    Ok(windows
        .iter()
        .map(|w| {
            let s = &seqs[w.seq];
            let targets: Vec<usize> =
                (w.start..w.end).map(|t| if t + 1 < s.len() { s.ids[t + 1] as usize } else { 0 }).collect();
            let weights = (w.start..w.end)
                .zip(&w.counted)
                .map(|(t, &c)| {
                    let speaker_target = t + 1 < s.len() && s.word_index[t + 1].is_none();
                    if c && !(exclude_speaker_targets && speaker_target) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Example {
                ids: s.ids[w.start..w.end].to_vec(),
                speaker_ids: s.speaker_ids[w.start..w.end].to_vec(),
                targets,
                weights,
            }
        })
        .collect())
}

/// Classifier examples: whole sequences, scored where `eval_mask` is set.
pub fn shift_examples(seqs: &[TokenSeq]) -> Vec<Example> {
    seqs.iter()
        .map(|s| Example {
            ids: s.ids.clone(),
            speaker_ids: s.speaker_ids.clone(),
            targets: s.shift_label.iter().map(|&b| b as usize).collect(),
            weights: s.eval_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        })
        .collect()
}

/// Loss and parameter gradients of one example.
pub trait Objective<T: Real>: Sync {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// `rng` is `Some` in training mode (dropout on).
    fn loss(&self, ex: &Example, rng: Option<&mut rng::Rng>, grads: bool) -> Result<(f64, Vec<Vec<T>>)>;
}

impl<T: Real> Objective<T> for TransformerLM<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn loss(&self, ex: &Example, rng: Option<&mut rng::Rng>, grads: bool) -> Result<(f64, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, grads);
        let out = self.forward_on(&mut tape, &vars, &ex.ids, &ex.speaker_ids, None, rng)?;
        let w: Vec<T> = ex.weights.iter().map(|&x| T::of(x)).collect();
        let loss = tape.cross_entropy_rows(out.logits, &ex.targets, &w)?;
        let value = tape.value(loss).data()[0].f64();
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, self.params.collect_grads(&tape, &vars)))
    }
}

impl<T: Real> Objective<T> for LstmClassifier<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn loss(&self, ex: &Example, _rng: Option<&mut rng::Rng>, grads: bool) -> Result<(f64, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, grads);
        let pred = self.forward_on(&mut tape, &vars, &ex.ids)?;
        let target: Vec<T> = ex.targets.iter().map(|&y| T::of(y as f64)).collect();
        let w: Vec<T> = ex.weights.iter().map(|&x| T::of(x)).collect();
        let loss = tape.mse(pred, &target, &w)?;
        let value = tape.value(loss).data()[0].f64();
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, self.params.collect_grads(&tape, &vars)))
    }
}

/// Largest relative error between analytic gradients and central differences
/// with step `h`, over every scalar parameter. Magnitudes below `floor` are
/// compared in absolute terms.
pub fn gradcheck<M: Objective<f64> + Clone>(model: &M, ex: &Example, h: f64, floor: f64) -> Result<f64> {
    let (_, grads) = model.loss(ex, None, true)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let x = probe.params().get(i).data()[j];
            probe.params_mut().get_mut(i).data_mut()[j] = x + h;
            let up = probe.loss(ex, None, false)?.0;
            probe.params_mut().get_mut(i).data_mut()[j] = x - h;
            let down = probe.loss(ex, None, false)?.0;
            probe.params_mut().get_mut(i).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor));
        }
    }
    Ok(worst)
}

/// Target-weighted mean loss over `examples`, inference mode.
pub fn mean_loss<T: Real, M: Objective<T>>(model: &M, examples: &[Example]) -> Result<f64> {
    let parts: Vec<(f64, f64)> = examples
        .par_iter()
        .filter(|e| e.weight() > 0.0)
        .map(|e| model.loss(e, None, false).map(|(l, _)| (l * e.weight(), e.weight())))
        .collect::<Result<_>>()?;
    let (total, weight) = parts.iter().fold((0.0, 0.0), |(a, b), (l, w)| (a + l, b + w));
    if weight == 0.0 {
        return Err(Error::Config("no scored targets in evaluation set".into()));
    }
    Ok(total / weight)
}

/// Generic loop: AdamW, global-norm clipping, evaluation every
/// `eval_every` steps and at the end, best-validation snapshot returned.
pub fn train<T: Real, M: Objective<T> + Clone>(
    mut model: M,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
) -> Result<(M, TrainLog)> {
    cfg.validate()?;
    let pool: Vec<usize> = (0..train.len()).filter(|&i| train[i].weight() > 0.0).collect();
    if pool.is_empty() {
        return Err(Error::Config("no scored targets in training set".into()));
    }
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut order_rng = rng::stream(cfg.seed, u64::MAX);
    let mut order = pool.clone();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, M)> = None;
    let (mut window_loss, mut window_steps) = (0.0, 0usize);

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pool.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<(f64, Vec<Vec<T>>, f64)> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut r = rng::stream(cfg.seed, (step * cfg.batch_size + j) as u64);
                let ex = &train[i];
                model.loss(ex, Some(&mut r), true).map(|(l, g)| (l, g, ex.weight()))
            })
            .collect::<Result<_>>()?;
        let total: f64 = results.iter().map(|r| r.2).sum();
        let mut grads: Vec<Vec<T>> = model.params().tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        let mut loss = 0.0;
        for (l, g, w) in &results {
            loss += l * w / total;
            let s = T::of(w / total);
            for (acc, part) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(part).for_each(|(a, &p)| *a += s * p);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        if cfg.lr_schedule == LrSchedule::Linear {
            opt.config.lr = cfg.lr * (1.0 - (step - 1) as f64 / cfg.max_steps as f64);
        }
        opt.step(model.params_mut(), &grads)?;
        window_loss += loss;
        window_steps += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let valid_loss = mean_loss(&model, valid)?;
            if !valid_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            log.records.push(LogRecord { step, train_loss: window_loss / window_steps as f64, valid_loss });
            (window_loss, window_steps) = (0.0, 0);
            if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
                best = Some((valid_loss, model.clone()));
                log.best_step = step;
            }
        }
    }
    let (_, best) = best.expect("at least one evaluation");
    Ok((best, log))
}

/// Trains the language model with next-token cross-entropy over all targets
/// (speaker tokens included unless excluded in `cfg`).
pub fn train_lm<T: Real>(
    mut model: TransformerLM<T>,
    train_seqs: &[TokenSeq],
    valid_seqs: &[TokenSeq],
    cfg: &TrainConfig,
) -> Result<(TransformerLM<T>, TrainLog)> {
    model.config.dropout_p = cfg.dropout;
    let ctx = model.config.ctx_len;
    let stride = cfg.stride.unwrap_or((ctx / 2).max(1));
    let train_ex = lm_examples(train_seqs, ctx, stride, cfg.exclude_speaker_targets)?;
    let valid_ex = lm_examples(valid_seqs, ctx, stride, cfg.exclude_speaker_targets)?;
    train(model, &train_ex, &valid_ex, cfg)
}

/// Trains the classifier with squared error between its output and the
/// shift label at scored positions.
pub fn train_lstm<T: Real>(
    model: LstmClassifier<T>,
    train_seqs: &[TokenSeq],
    valid_seqs: &[TokenSeq],
    cfg: &TrainConfig,
) -> Result<(LstmClassifier<T>, TrainLog)> {
    train(model, &shift_examples(train_seqs), &shift_examples(valid_seqs), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Dialog, Speaker, SynthGrammar, Turn};
    use crate::models::{LstmConfig, TransformerConfig};
    use crate::tokenizer::{encode_dialog, train_bpe, Vocab};

    fn fixture() -> (Vocab, Vec<TokenSeq>) {
        let d = Dialog::new("f", vec![Turn::new(Speaker::A, vec!["hi".into()]), Turn::new(Speaker::B, vec!["hello".into(), "there".into()])])
            .unwrap();
        let v = train_bpe(std::slice::from_ref(&d), 40).unwrap();
        let s = encode_dialog(&d, &v).unwrap();
        (v, vec![s])
    }

    fn tiny_lm(v: usize) -> TransformerLM<f32> {
        let c = TransformerConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, ctx_len: 16, vocab_size: v, dropout_p: 0.0 };
        TransformerLM::init(c, 1).unwrap()
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let (v, seqs) = fixture();
        let m = tiny_lm(v.len());
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, max_steps: 5, eval_every: 2, ..Default::default() };
        let (out, log) = train_lm(m.clone(), &seqs, &seqs, &cfg).unwrap();
        assert_eq!(out.params, m.params);
        assert_eq!(log.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 5]);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (v, seqs) = fixture();
        let cfg = TrainConfig { lr: 1e-2, max_steps: 6, eval_every: 3, ..Default::default() };
        let a = train_lm(tiny_lm(v.len()), &seqs, &seqs, &cfg).unwrap();
        let b = train_lm(tiny_lm(v.len()), &seqs, &seqs, &cfg).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.params, b.0.params);
    }

    #[test]
    fn selection_keeps_lowest_validation_loss() {
        let corpus = synth_corpus(&SynthGrammar::context_default(), 12, 2).unwrap();
        let v = train_bpe(&corpus, 120).unwrap();
        let seqs: Vec<TokenSeq> = corpus.iter().map(|d| encode_dialog(d, &v).unwrap()).collect();
        let cfg = TrainConfig { lr: 3e-2, max_steps: 30, eval_every: 5, batch_size: 2, ..Default::default() };
        let mut c = tiny_lm(v.len()).config;
        c.ctx_len = 64;
        let (best, log) = train_lm(TransformerLM::<f32>::init(c, 3).unwrap(), &seqs[..8], &seqs[8..], &cfg).unwrap();
        let min = log.records.iter().map(|r| r.valid_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_valid_loss(), Some(min));
        let ex = lm_examples(&seqs[8..], 64, 32, false).unwrap();
        assert!((mean_loss(&best, &ex).unwrap() - min).abs() < 1e-9);
    }

    #[test]
    fn lstm_loss_closed_forms() {
        let (v, seqs) = fixture();
        let m = LstmClassifier::<f64>::zeros(LstmConfig { vocab_size: v.len(), d_embed: 3, hidden: 4, n_layers: 2 }).unwrap();
        // scored positions "hi" (shift) and "hello" (no shift): all outputs 0.5
        let ex = shift_examples(&seqs);
        assert_eq!(mean_loss(&m, &ex).unwrap(), 0.25);
    }

    #[test]
    fn lstm_overfits_fixture() {
        let (v, seqs) = fixture();
        let m = LstmClassifier::<f32>::init(LstmConfig { vocab_size: v.len(), d_embed: 8, hidden: 8, n_layers: 2 }, 0).unwrap();
        let cfg = TrainConfig { lr: 3e-2, max_steps: 200, eval_every: 50, batch_size: 1, dropout: 0.0, ..Default::default() };
        let (m, log) = train_lstm(m, &seqs, &seqs, &cfg).unwrap();
        assert!(log.best_valid_loss().unwrap() < 0.05);
        let p = m.predict(&seqs[0].ids).unwrap();
        assert!(p[1] > 0.9, "p(shift | hi) = {}", p[1]);
    }

    #[test]
    fn masked_targets_get_no_gradient() {
        let (v, seqs) = fixture();
        let m = tiny_lm(v.len()).cast::<f64>();
        let mut ex = lm_examples(&seqs, 16, 8, false).unwrap().remove(0);
        // only the speaker-token target at position 1 counts
        ex.weights = vec![0.0; ex.weights.len()];
        ex.weights[1] = 1.0;
        let (_, g1) = m.loss(&ex, None, true).unwrap();
        let mut ex2 = ex.clone();
        ex2.targets[2] = 0;
        ex2.targets[3] = 5;
        let (_, g2) = m.loss(&ex2, None, true).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn csv_header() {
        let log = TrainLog { records: vec![LogRecord { step: 1, train_loss: 2.0, valid_loss: 1.5 }], best_step: 1 };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,train_loss,valid_loss\n1,2,1.5\n");
    }
}
