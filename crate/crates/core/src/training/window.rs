//! Splitting long sequences into context-sized windows.

use crate::tokenizer::TokenSeq;
use crate::{Error, Result};

/// `seqs[seq][start..end]`. `counted[i]` marks local positions whose
/// next-token target belongs to this window; across all windows of a
/// sequence every target is counted exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub seq: usize,
    pub start: usize,
    pub end: usize,
    pub counted: Vec<bool>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Windows of at most `ctx_len` tokens. After a window `[s, e)` the next one
/// starts at the last turn start in `(s, s + stride]`, else the first turn
/// start in `(s + stride, e - 1]`, else at `s + stride`; never after `e - 1`,
/// so no target is skipped. Targets already counted by the previous window
/// are masked.
pub fn window_dialogs(seqs: &[TokenSeq], ctx_len: usize, stride: usize) -> Result<Vec<Window>> {
    if ctx_len < 2 || stride == 0 || stride > ctx_len {
        return Err(Error::Config(format!("need 0 < stride ({stride}) <= ctx_len ({ctx_len}) and ctx_len >= 2")));
    }
    let mut out = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        let n = seq.len();
        let turn_start = |i: usize| seq.word_index[i].is_none();
        let mut start = 0;
        // targets at positions < covered are already counted
        let mut covered = 0;
        loop {
            let end = (start + ctx_len).min(n);
            let last_target = end.saturating_sub(1);
            let counted = (start..end).map(|t| t >= covered && t < last_target).collect();
            out.push(Window { seq: si, start, end, counted });
            if end == n {
                break;
            }
            covered = last_target;
            let limit = start + stride;
            let next = (start + 1..=limit.min(last_target))
                .rev()
                .find(|&i| turn_start(i))
                .or_else(|| (limit + 1..=last_target).find(|&i| turn_start(i)))
                .unwrap_or(limit);
            start = next.min(last_target);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Sequence with turn starts at the given positions.
    fn seq(n: usize, starts: &[usize]) -> TokenSeq {
        TokenSeq {
            ids: vec![5; n],
            speaker_ids: vec![1; n],
            shift_label: vec![false; n],
            eval_mask: vec![true; n],
            turn_index: vec![0; n],
            word_index: (0..n).map(|i| if starts.contains(&i) { None } else { Some(i as u32) }).collect(),
        }
    }

    fn coverage(ws: &[Window], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for w in ws {
            for (i, &k) in w.counted.iter().enumerate() {
                if k {
                    c[w.start + i] += 1;
                }
            }
        }
        c
    }

    #[test]
    fn short_sequence_is_one_window() {
        let ws = window_dialogs(&[seq(10, &[0])], 16, 8).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!((ws[0].start, ws[0].end), (0, 10));
        assert_eq!(ws[0].counted.iter().filter(|&&c| c).count(), 9);
    }

    #[test]
    fn length_300_ctx_256_stride_128() {
        let ws = window_dialogs(&[seq(300, &[0])], 256, 128).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!((ws[1].start, ws[1].end), (128, 300));
        // targets 128..255 were counted by the first window
        assert!(ws[1].counted[..127].iter().all(|&c| !c));
        assert!(ws[1].counted[127..171].iter().all(|&c| c));
        assert_eq!(coverage(&ws, 300)[..299], vec![1; 299][..]);
    }

    #[test]
    fn windows_snap_to_turn_starts() {
        let starts: Vec<usize> = (0..200).step_by(7).collect();
        let ws = window_dialogs(&[seq(200, &starts)], 32, 16).unwrap();
        assert!(ws.len() > 1);
        for w in &ws {
            assert!(starts.contains(&w.start), "window at {}", w.start);
        }
    }

    #[test]
    fn bad_stride_rejected() {
        assert!(window_dialogs(&[], 8, 9).is_err());
        assert!(window_dialogs(&[], 8, 0).is_err());
    }

    proptest! {
        #[test]
        fn every_target_counted_once(n in 1usize..300, ctx in 2usize..64, frac in 0.05f64..1.0, gaps in prop::collection::vec(1usize..40, 1..40)) {
            let stride = ((ctx as f64 * frac) as usize).clamp(1, ctx);
            let mut starts = vec![0];
            for g in gaps { let s = starts.last().unwrap() + g; starts.push(s); }
            let ws = window_dialogs(&[seq(n, &starts)], ctx, stride).unwrap();
            let c = coverage(&ws, n);
            prop_assert!(c[..n - 1].iter().all(|&k| k == 1));
            prop_assert_eq!(c[n - 1], 0);
            prop_assert!(ws.iter().all(|w| w.len() <= ctx && !w.is_empty()));
        }
    }
}
