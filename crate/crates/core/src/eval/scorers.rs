//! Per-token shift probabilities from each predictor.

use super::trp_probs;
use crate::corpus::Dialog;
use crate::models::{LstmClassifier, PosBigramTable, TransformerLM};
use crate::numerics::Real;
use crate::tokenizer::TokenSeq;
use crate::training::window_dialogs;
use crate::{Error, Result};

/// Probability, at every token position, that the next token opens a turn.
pub trait ShiftScorer: Sync {
    fn shift_probs(&self, dialog: &Dialog, seq: &TokenSeq) -> Result<Vec<f64>>;
}

impl<T: Real> ShiftScorer for TransformerLM<T> {
    /// TRP per position. Sequences longer than the context are scored in
    /// half-overlapping windows; each position takes its value from the
    /// window that counts its target.
    fn shift_probs(&self, _dialog: &Dialog, seq: &TokenSeq) -> Result<Vec<f64>> {
        let ctx = self.config.ctx_len;
        let mut out = vec![0.0; seq.len()];
        for w in window_dialogs(std::slice::from_ref(seq), ctx, (ctx / 2).max(1))? {
            let logits = self.logits(&seq.ids[w.start..w.end], &seq.speaker_ids[w.start..w.end])?;
            let trp = trp_probs(&logits);
            for (i, &c) in w.counted.iter().enumerate() {
                if c || w.start + i + 1 == seq.len() {
                    out[w.start + i] = trp[i];
                }
            }
        }
        Ok(out)
    }
}

impl<T: Real> ShiftScorer for LstmClassifier<T> {
    fn shift_probs(&self, _dialog: &Dialog, seq: &TokenSeq) -> Result<Vec<f64>> {
        Ok(self.predict(&seq.ids)?.iter().map(|p| p.f64()).collect())
    }
}

/// POS-bigram scores mapped onto tokens: a word's probability sits on its
/// last token; word-internal tokens and speaker tokens get 0, since a turn
/// cannot end inside a word.
pub struct PosScorer<'a>(pub &'a PosBigramTable);

impl ShiftScorer for PosScorer<'_> {
    fn shift_probs(&self, dialog: &Dialog, seq: &TokenSeq) -> Result<Vec<f64>> {
        let mut per_word = Vec::with_capacity(dialog.num_words());
        for t in &dialog.turns {
            let tags = t.pos.as_ref().ok_or_else(|| Error::MissingTags(dialog.id.clone()))?;
            per_word.extend(self.0.predict(tags));
        }
        (0..seq.len())
            .map(|t| match seq.word_index[t] {
                Some(w) if seq.word_index.get(t + 1).copied().flatten() != Some(w) => per_word
                    .get(w as usize)
                    .copied()
                    .ok_or_else(|| Error::Length(format!("dialog {} has fewer words than its encoding", dialog.id))),
                _ => Ok(0.0),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthGrammar};
    use crate::models::{fit_pos_bigram, TransformerConfig};
    use crate::tokenizer::{encode_dialog, train_bpe};

    #[test]
    fn windowed_scores_match_full_context_within_window() {
        let corpus = synth_corpus(&SynthGrammar::context_default(), 2, 5).unwrap();
        let v = train_bpe(&corpus, 150).unwrap();
        let seq = encode_dialog(&corpus[0], &v).unwrap();
        let cfg = |ctx| TransformerConfig { n_layers: 1, n_heads: 1, d_model: 8, d_ff: 8, ctx_len: ctx, vocab_size: v.len(), dropout_p: 0.0 };
        let big = TransformerLM::<f64>::init(cfg(seq.len()), 1).unwrap();
        let small = TransformerLM::from_params(cfg(8), {
            let mut p = big.params.clone();
            // keep only the first 8 position rows
            let wpe = p.get_mut(1);
            *wpe = crate::numerics::Tensor::new(&[8, 8], wpe.data()[..64].to_vec()).unwrap();
            p
        })
        .unwrap();
        let full = big.shift_probs(&corpus[0], &seq).unwrap();
        let windowed = small.shift_probs(&corpus[0], &seq).unwrap();
        assert_eq!(full.len(), windowed.len());
        // the first window sees exactly the same inputs
        for t in 0..7 {
            assert!((full[t] - windowed[t]).abs() < 1e-12);
        }
        assert!(windowed.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn pos_scores_sit_on_word_ends() {
        let corpus = synth_corpus(&SynthGrammar::context_default(), 5, 9).unwrap();
        let table = fit_pos_bigram(&corpus, 1.0).unwrap();
        let v = train_bpe(&corpus, 150).unwrap();
        let seq = encode_dialog(&corpus[0], &v).unwrap();
        let p = PosScorer(&table).shift_probs(&corpus[0], &seq).unwrap();
        let tags: Vec<String> = corpus[0].turns[0].pos.clone().unwrap();
        let first = table.predict(&tags);
        let ends: Vec<usize> = (1..seq.len())
            .filter(|&t| seq.turn_index[t] == 0 && seq.word_index[t].is_some() && seq.word_index[t + 1] != seq.word_index[t])
            .collect();
        assert_eq!(ends.len(), first.len());
        for (&t, &q) in ends.iter().zip(&first) {
            assert_eq!(p[t], q);
        }
        assert_eq!(p[0], 0.0);
    }
}
