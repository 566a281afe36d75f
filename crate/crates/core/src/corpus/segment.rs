//! Turn extraction for time-stamped transcripts with overlap.
//!
//! Order of steps: isolated backchannels out, same-speaker utterances joined
//! into IPUs, IPUs contained in the other speaker's IPU dropped, remaining IPUs
//! ordered by start time and collapsed into alternating turns.

use std::cmp::Ordering;

use super::{merge_same_speaker, normalize_text, Dialog, RawUtterance, SegmentationConfig, Turn};
use crate::{Error, Result};

/// Start time, then speaker A before B.
fn order(a: &RawUtterance, b: &RawUtterance) -> Ordering {
    a.start_s.partial_cmp(&b.start_s).unwrap_or(Ordering::Equal).then(a.speaker.cmp(&b.speaker))
}

fn check_sorted(utts: &[RawUtterance]) -> Result<()> {
    match utts.windows(2).position(|w| w[1].start_s < w[0].start_s) {
        Some(i) => Err(Error::Unsorted(i + 1)),
        None => Ok(()),
    }
}

/// Removes backchannel utterances with no same-speaker speech within
/// `isolation_gap_s` on either side. Dialog edges count as infinitely far.
pub fn remove_backchannels(utts: &[RawUtterance], cfg: &SegmentationConfig) -> Result<Vec<RawUtterance>> {
    check_sorted(utts)?;
    let is_backchannel = |u: &RawUtterance| {
        let text = normalize_text(&u.text).join(" ");
        cfg.backchannel_lexicon.iter().any(|entry| normalize_text(entry).join(" ") == text)
    };
    let mut out = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        if is_backchannel(u) {
            let same = |j: &usize| utts[*j].speaker == u.speaker;
            let before =
                (0..i).filter(same).map(|j| u.start_s - utts[j].end_s).fold(f64::INFINITY, f64::min);
            let after =
                (i + 1..utts.len()).filter(same).map(|j| utts[j].start_s - u.end_s).fold(f64::INFINITY, f64::min);
            if before > cfg.isolation_gap_s && after > cfg.isolation_gap_s {
                continue;
            }
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// Joins each speaker's utterances separated by less than `ipu_gap_s`.
pub fn merge_ipus(utts: &[RawUtterance], cfg: &SegmentationConfig) -> Result<Vec<RawUtterance>> {
    check_sorted(utts)?;
    let mut out: Vec<RawUtterance> = Vec::new();
    for speaker in [super::Speaker::A, super::Speaker::B] {
        let mut current: Option<RawUtterance> = None;
        for u in utts.iter().filter(|u| u.speaker == speaker) {
            current = match current.take() {
                Some(mut ipu) if u.start_s - ipu.end_s < cfg.ipu_gap_s => {
                    ipu.end_s = ipu.end_s.max(u.end_s);
                    ipu.text = format!("{} {}", ipu.text.trim(), u.text.trim());
                    Some(ipu)
                }
                Some(ipu) => {
                    out.push(ipu);
                    Some(u.clone())
                }
                None => Some(u.clone()),
            };
        }
        out.extend(current);
    }
    out.sort_by(order);
    Ok(out)
}

/// Drops IPUs lying entirely inside an IPU of the other speaker. Identical
/// spans keep speaker A's IPU.
pub fn drop_embedded_ipus(ipus: &[RawUtterance]) -> Vec<RawUtterance> {
    let inside = |x: &RawUtterance, y: &RawUtterance| x.start_s >= y.start_s && x.end_s <= y.end_s;
    ipus.iter()
        .filter(|x| {
            !ipus.iter().any(|y| {
                y.speaker != x.speaker && inside(x, y) && !(inside(y, x) && x.speaker == super::Speaker::A)
            })
        })
        .cloned()
        .collect()
}

/// Orders IPUs by start time and merges same-speaker runs into turns.
pub fn build_turns(ipus: &[RawUtterance], id: &str) -> Result<Dialog> {
    let mut sorted = ipus.to_vec();
    sorted.sort_by(order);
    let turns: Vec<Turn> = sorted
        .iter()
        .filter_map(|u| {
            let words = normalize_text(&u.text);
            (!words.is_empty()).then(|| Turn {
                speaker: u.speaker,
                words,
                pos: None,
                start_s: Some(u.start_s),
                end_s: Some(u.end_s),
            })
        })
        .collect();
    if turns.is_empty() {
        return Err(Error::EmptyDialog);
    }
    Dialog::new(id, merge_same_speaker(turns))
}

/// Full pipeline on utterances in any order.
pub fn segment(utts: &[RawUtterance], cfg: &SegmentationConfig, id: &str) -> Result<Dialog> {
    cfg.validate()?;
    let mut sorted = utts.to_vec();
    sorted.sort_by(order);
    let kept = remove_backchannels(&sorted, cfg)?;
    let ipus = merge_ipus(&kept, cfg)?;
    build_turns(&drop_embedded_ipus(&ipus), id)
}

#[cfg(test)]
mod tests {
    use super::super::Speaker::{self, A, B};
    use super::*;
    use proptest::prelude::*;

    fn u(s: Speaker, start: f64, end: f64, text: &str) -> RawUtterance {
        RawUtterance::new(s, start, end, text).unwrap()
    }

    fn cfg() -> SegmentationConfig {
        SegmentationConfig::default()
    }

    #[test]
    fn isolated_backchannel_is_removed() {
        let utts = vec![u(B, 0.0, 0.5, "so"), u(B, 2.0, 2.3, "mhm"), u(B, 3.5, 4.0, "right then")];
        let out = remove_backchannels(&utts, &cfg()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|x| x.text != "mhm"));
    }

    #[test]
    fn backchannel_near_own_speech_is_kept() {
        let utts = vec![u(B, 0.0, 0.5, "so"), u(B, 2.0, 2.3, "mhm"), u(B, 2.8, 4.0, "right then")];
        assert_eq!(remove_backchannels(&utts, &cfg()).unwrap().len(), 3);
    }

    #[test]
    fn other_speaker_does_not_count_for_isolation() {
        let utts = vec![u(A, 1.8, 2.1, "well"), u(B, 2.0, 2.3, "mhm"), u(A, 2.4, 3.0, "yes")];
        assert_eq!(remove_backchannels(&utts, &cfg()).unwrap().len(), 2);
    }

    #[test]
    fn backchannel_edge_cases() {
        assert!(remove_backchannels(&[], &cfg()).unwrap().is_empty());
        let unsorted = vec![u(A, 2.0, 3.0, "a"), u(A, 0.0, 1.0, "b")];
        assert!(matches!(remove_backchannels(&unsorted, &cfg()), Err(Error::Unsorted(1))));
    }

    #[test]
    fn ipu_merge_at_short_gap() {
        let out = merge_ipus(&[u(A, 0.0, 1.0, "yes"), u(A, 1.3, 2.0, "i think")], &cfg()).unwrap();
        assert_eq!(out, vec![u(A, 0.0, 2.0, "yes i think")]);
    }

    #[test]
    fn ipu_split_at_long_gap() {
        let out = merge_ipus(&[u(A, 0.0, 1.0, "yes"), u(A, 1.6, 2.0, "no")], &cfg()).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn ipu_merge_is_transitive_and_per_speaker() {
        let utts = vec![
            u(A, 0.0, 1.0, "a"),
            u(B, 0.5, 0.9, "x"),
            u(A, 1.2, 1.5, "b"),
            u(A, 1.8, 2.0, "c"),
        ];
        let out = merge_ipus(&utts, &cfg()).unwrap();
        assert_eq!(out, vec![u(A, 0.0, 2.0, "a b c"), u(B, 0.5, 0.9, "x")]);
        let single = vec![u(B, 1.0, 2.0, "only")];
        assert_eq!(merge_ipus(&single, &cfg()).unwrap(), single);
    }

    #[test]
    fn embedded_ipu_dropped_partial_overlap_kept() {
        let out = drop_embedded_ipus(&[u(A, 0.0, 2.0, "long"), u(B, 0.5, 1.5, "inside")]);
        assert_eq!(out, vec![u(A, 0.0, 2.0, "long")]);
        let both = vec![u(A, 0.0, 2.0, "long"), u(B, 1.5, 3.0, "over")];
        assert_eq!(drop_embedded_ipus(&both), both);
        let apart = vec![u(A, 0.0, 1.0, "a"), u(B, 1.5, 3.0, "b")];
        assert_eq!(drop_embedded_ipus(&apart), apart);
    }

    #[test]
    fn turns_merge_runs_and_order_by_start() {
        let d = build_turns(&[u(A, 0.0, 1.0, "one"), u(A, 2.0, 3.0, "two"), u(B, 4.0, 5.0, "three")], "x").unwrap();
        assert_eq!(d.turns.len(), 2);
        assert_eq!(d.turns[0].words, vec!["one", "two"]);
        assert_eq!((d.turns[0].start_s, d.turns[0].end_s), (Some(0.0), Some(3.0)));

        let d = build_turns(&[u(A, 3.5, 4.0, "c"), u(A, 0.0, 2.0, "a"), u(B, 1.5, 3.0, "b")], "x").unwrap();
        let speakers: Vec<_> = d.turns.iter().map(|t| t.speaker).collect();
        assert_eq!(speakers, vec![A, B, A]);

        let d = build_turns(&[u(B, 0.0, 1.0, "solo")], "x").unwrap();
        assert_eq!(d.turns.len(), 1);
        assert!(matches!(build_turns(&[], "x"), Err(Error::EmptyDialog)));
    }

    #[test]
    fn rebuilding_turns_is_idempotent() {
        let d = build_turns(
            &[u(A, 0.0, 1.0, "a"), u(B, 1.1, 1.4, "b"), u(B, 1.6, 2.0, "c"), u(A, 2.5, 3.0, "d")],
            "x",
        )
        .unwrap();
        let again = merge_same_speaker(d.turns.clone());
        assert_eq!(again, d.turns);
    }

    #[test]
    fn equal_start_ties_put_a_first() {
        let d = build_turns(&[u(B, 1.0, 2.0, "b"), u(A, 1.0, 1.5, "a")], "x").unwrap();
        assert_eq!(d.turns[0].speaker, A);
    }

    fn utterances() -> impl Strategy<Value = Vec<RawUtterance>> {
        let word = prop::sample::select(vec!["mhm", "yeah", "so", "then", "okay", "we", "went"]);
        prop::collection::vec((any::<bool>(), 0u32..200, 1u32..40, prop::collection::vec(word, 1..3)), 1..25).prop_map(|raw| {
            raw.into_iter()
                .map(|(b, start, len, words)| {
                    let (s, e) = (start as f64 / 10.0, (start + len) as f64 / 10.0);
                    u(if b { B } else { A }, s, e, &words.join(" "))
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn segmented_dialogs_alternate_in_time_order(utts in utterances()) {
            if let Ok(d) = segment(&utts, &cfg(), "p") {
                prop_assert!(d.turns.windows(2).all(|w| w[0].speaker != w[1].speaker));
                prop_assert!(d.turns.windows(2).all(|w| w[0].start_s <= w[1].start_s));
                prop_assert_eq!(merge_same_speaker(d.turns.clone()), d.turns);
            }
        }

        #[test]
        fn only_lexicon_entries_are_removed(mut utts in utterances()) {
            utts.sort_by(order);
            let kept = remove_backchannels(&utts, &cfg()).unwrap();
            let lexicon = &cfg().backchannel_lexicon;
            let removed: Vec<_> = utts.iter().filter(|x| !kept.contains(x)).collect();
            prop_assert!(removed.iter().all(|x| lexicon.contains(&x.text)));
            prop_assert_eq!(removed.len() + kept.len(), utts.len());
        }
    }
}
