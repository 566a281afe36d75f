//! Word-internal BPE and dialog serialization.
//!
//! A word starts as its characters with the last one suffixed by `</w>`, so
//! merges never cross word boundaries and decoding can restore spaces.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialog, Turn};
use crate::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const VOCAB_VERSION: u32 = 1;

const PAD: &str = "<pad>";
const UNK: &str = "<unk>";
const SPEAKER1: &str = "<speaker1>";
const SPEAKER2: &str = "<speaker2>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad_id: u32,
    pub unk_id: u32,
    pub speaker1_id: u32,
    pub speaker2_id: u32,
}

pub const SPECIALS: Specials = Specials { pad_id: 0, unk_id: 1, speaker1_id: 2, speaker2_id: 3 };

#[derive(Clone, Debug)]
pub struct Vocab {
    token_of: Vec<String>,
    id_of: HashMap<String, u32>,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.alphabet == other.alphabet && self.merges == other.merges
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: BTreeMap<String, u32>,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == chars.len() { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

impl Vocab {
    fn build(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut token_of: Vec<String> = [PAD, UNK, SPEAKER1, SPEAKER2].iter().map(|s| s.to_string()).collect();
        let mut id_of: HashMap<String, u32> =
            token_of.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut add = |tok: String| {
            if !id_of.contains_key(&tok) {
                id_of.insert(tok.clone(), token_of.len() as u32);
                token_of.push(tok);
            }
        };
        for a in &alphabet {
            add(a.clone());
        }
        for (l, r) in &merges {
            add(format!("{l}{r}"));
        }
        let ranks = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Self { token_of, id_of, alphabet, merges, ranks }
    }

    pub fn specials(&self) -> Specials {
        SPECIALS
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    pub fn is_speaker(&self, id: u32) -> bool {
        id == SPECIALS.speaker1_id || id == SPECIALS.speaker2_id
    }

    /// Speaker token for slot 1 or 2.
    pub fn speaker_token(&self, slot: u8) -> u32 {
        if slot == 1 {
            SPECIALS.speaker1_id
        } else {
            SPECIALS.speaker2_id
        }
    }

    /// Token ids for one normalized word; words with symbols outside the
    /// vocabulary become a single `<unk>`.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            match best {
                Some((l, r)) => merge_pair(&mut symbols, &l, &r),
                None => break,
            }
        }
        let ids: Option<Vec<u32>> = symbols.iter().map(|s| self.id_of(s)).collect();
        ids.unwrap_or_else(|| vec![SPECIALS.unk_id])
    }

    pub fn to_json(&self) -> Result<String> {
        let specials = BTreeMap::from([
            ("pad".to_string(), SPECIALS.pad_id),
            ("unk".to_string(), SPECIALS.unk_id),
            ("speaker1".to_string(), SPECIALS.speaker1_id),
            ("speaker2".to_string(), SPECIALS.speaker2_id),
        ]);
        let file = VocabFile {
            version: VOCAB_VERSION,
            specials,
            alphabet: self.alphabet.clone(),
            merges: self.merges.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.version != VOCAB_VERSION {
            return Err(Error::Config(format!("vocab version {} (expected {VOCAB_VERSION})", file.version)));
        }
        let want = [("pad", 0), ("unk", 1), ("speaker1", 2), ("speaker2", 3)];
        if want.iter().any(|(k, v)| file.specials.get(*k) != Some(v)) {
            return Err(Error::Config(format!("unexpected special ids {:?}", file.specials)));
        }
        Ok(Self::build(file.alphabet, file.merges))
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let json = self.to_json().expect("vocab serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Greedy BPE over the words of `dialogs`. The most frequent adjacent pair
/// is merged first; frequency ties go to the lexicographically smallest
/// merged string, then the smallest pair.
pub fn train_bpe(dialogs: &[Dialog], vocab_size: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in dialogs.iter().flat_map(|d| &d.turns).flat_map(|t| &t.words) {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> = counts.iter().map(|(w, &c)| (word_symbols(w), c)).collect();
    let alphabet: Vec<String> =
        words.iter().flat_map(|(s, _)| s.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
    let minimum = alphabet.len() + 4;
    if vocab_size < minimum {
        return Err(Error::VocabTooSmall { requested: vocab_size, minimum });
    }
    let mut known: BTreeSet<String> = alphabet.iter().cloned().collect();
    let mut merges = Vec::new();
    while minimum + merges.len() < vocab_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, c) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .map(|((l, r), c)| (c, format!("{l}{r}"), l.to_string(), r.to_string()))
            .min_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| (&a.2, &a.3).cmp(&(&b.2, &b.3))));
        let Some((_, joined, l, r)) = best else { break };
        for (symbols, _) in &mut words {
            merge_pair(symbols, &l, &r);
        }
        known.insert(joined);
        merges.push((l, r));
    }
    Ok(Vocab::build(alphabet, merges))
}

/// A serialized dialog. All vectors are parallel.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// 1 or 2: the speaker slot of the turn each token belongs to.
    pub speaker_ids: Vec<u8>,
    /// True where the next token is a speaker token.
    pub shift_label: Vec<bool>,
    /// True where a turn-shift prediction is scored.
    pub eval_mask: Vec<bool>,
    /// Turn each token belongs to (a speaker token belongs to the turn it opens).
    pub turn_index: Vec<u32>,
    /// Index of the word a token is part of, counted over the whole dialog.
    pub word_index: Vec<Option<u32>>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions `range`, keeping labels and masks as they were.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenSeq {
        TokenSeq {
            ids: self.ids[range.clone()].to_vec(),
            speaker_ids: self.speaker_ids[range.clone()].to_vec(),
            shift_label: self.shift_label[range.clone()].to_vec(),
            eval_mask: self.eval_mask[range.clone()].to_vec(),
            turn_index: self.turn_index[range.clone()].to_vec(),
            word_index: self.word_index[range].to_vec(),
        }
    }

    /// Positions holding a speaker token.
    pub fn turn_starts(&self, vocab: &Vocab) -> Vec<usize> {
        (0..self.len()).filter(|&i| vocab.is_speaker(self.ids[i])).collect()
    }

    pub fn num_turns(&self) -> usize {
        self.turn_index.last().map_or(0, |&t| t as usize + 1)
    }
}

/// Serializes a dialog, mapping its first turn to speaker slot 1.
pub fn encode_dialog(dialog: &Dialog, vocab: &Vocab) -> Result<TokenSeq> {
    encode_turns(&dialog.turns, 1, vocab)
}

/// Serializes turns with the first turn in speaker slot `first_slot` (1 or 2);
/// later turns alternate.
pub fn encode_turns(turns: &[Turn], first_slot: u8, vocab: &Vocab) -> Result<TokenSeq> {
    if turns.is_empty() {
        return Err(Error::EmptyDialog);
    }
    let mut seq = TokenSeq::default();
    let mut slot = first_slot;
    let mut word = 0u32;
    for (t, turn) in turns.iter().enumerate() {
        if turn.words.is_empty() {
            return Err(Error::InvalidUtterance(format!("turn {t} has no words")));
        }
        seq.ids.push(vocab.speaker_token(slot));
        seq.speaker_ids.push(slot);
        seq.turn_index.push(t as u32);
        seq.word_index.push(None);
        for w in &turn.words {
            for id in vocab.encode_word(w) {
                seq.ids.push(id);
                seq.speaker_ids.push(slot);
                seq.turn_index.push(t as u32);
                seq.word_index.push(Some(word));
            }
            word += 1;
        }
        slot = 3 - slot;
    }
    let n = seq.ids.len();
    seq.shift_label = (0..n).map(|i| i + 1 < n && vocab.is_speaker(seq.ids[i + 1])).collect();
    seq.eval_mask = (0..n).map(|i| !vocab.is_speaker(seq.ids[i]) && i + 1 < n).collect();
    Ok(seq)
}

/// Renders ids as space-separated words; speaker slots print as `<A>`/`<B>`.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    let mut cur = String::new();
    for &id in ids {
        let tok = vocab.token_of(id).ok_or(Error::TokenOutOfRange(id))?;
        let special = match id {
            x if x == SPECIALS.speaker1_id => Some("<A>"),
            x if x == SPECIALS.speaker2_id => Some("<B>"),
            x if x == SPECIALS.unk_id => Some(UNK),
            x if x == SPECIALS.pad_id => Some(PAD),
            _ => None,
        };
        if let Some(s) = special {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(s.to_string());
        } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
            cur.push_str(stem);
            words.push(std::mem::take(&mut cur));
        } else {
            cur.push_str(tok);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    Ok(words.join(" "))
}

/// The text `decode(encode_dialog(d))` should produce.
pub fn render_dialog(dialog: &Dialog) -> String {
    let mut parts = Vec::new();
    for (i, t) in dialog.turns.iter().enumerate() {
        parts.push(if i % 2 == 0 { "<A>".to_string() } else { "<B>".to_string() });
        parts.push(t.text());
    }
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Speaker, SynthGrammar};
    use proptest::prelude::*;

    fn dialog(turns: &[&str]) -> Dialog {
        let mut s = Speaker::A;
        let turns = turns
            .iter()
            .map(|t| {
                let turn = Turn::new(s, t.split_whitespace().map(String::from).collect());
                s = s.other();
                turn
            })
            .collect();
        Dialog::new("t", turns).unwrap()
    }

    #[test]
    fn bpe_pair_counting_example() {
        let corpus: Vec<Dialog> = (0..10).map(|_| dialog(&["aaab"])).collect();
        // alphabet {a, b</w>}
        let v = train_bpe(&corpus, 2 + 4 + 2).unwrap();
        let want = vec![("a".to_string(), "a".to_string()), ("aa".to_string(), "a".to_string())];
        assert_eq!(v.merges(), &want[..]);
        let v0 = train_bpe(&corpus, 2 + 4).unwrap();
        assert!(v0.merges().is_empty());
        assert_eq!(v0.len(), 6);
        assert!(matches!(train_bpe(&corpus, 5), Err(Error::VocabTooSmall { .. })));
        assert!(matches!(train_bpe(&[], 100), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn bpe_is_deterministic() {
        let corpus = synth_corpus(&SynthGrammar::context_default(), 30, 4).unwrap();
        assert_eq!(train_bpe(&corpus, 120).unwrap().merges(), train_bpe(&corpus, 120).unwrap().merges());
    }

    #[test]
    fn encode_two_turn_example() {
        let d = dialog(&["hi", "hello there"]);
        let v = train_bpe(&[d.clone()], 200).unwrap();
        let seq = encode_dialog(&d, &v).unwrap();
        let ids = |w: &str| v.encode_word(w);
        assert_eq!(ids("hi").len(), 1);
        let want: Vec<u32> = [vec![2], ids("hi"), vec![3], ids("hello"), ids("there")].concat();
        assert_eq!(seq.ids, want);
        assert_eq!(seq.shift_label, vec![false, true, false, false, false]);
        assert_eq!(seq.eval_mask, vec![false, true, false, true, false]);
        assert_eq!(seq.speaker_ids, vec![1, 1, 2, 2, 2]);
    }

    #[test]
    fn first_turn_maps_to_speaker1_even_for_b() {
        let d = Dialog::new("b", vec![Turn::new(Speaker::B, vec!["x".into()])]).unwrap();
        let v = train_bpe(&[d.clone()], 10).unwrap();
        let seq = encode_dialog(&d, &v).unwrap();
        assert_eq!(seq.ids[0], v.specials().speaker1_id);
        assert!(seq.shift_label.iter().all(|&s| !s));
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = train_bpe(&[dialog(&["abc"])], 20).unwrap();
        assert_eq!(v.encode_word("abz"), vec![v.specials().unk_id]);
        let seq = encode_dialog(&dialog(&["abz abc"]), &v).unwrap();
        assert!(decode(&seq.ids, &v).unwrap().contains("<unk>"));
    }

    #[test]
    fn decode_speaker_and_range() {
        let v = train_bpe(&[dialog(&["a"])], 10).unwrap();
        assert_eq!(decode(&[2], &v).unwrap(), "<A>");
        assert!(matches!(decode(&[999], &v), Err(Error::TokenOutOfRange(999))));
    }

    #[test]
    fn vocab_json_roundtrip() {
        let corpus = synth_corpus(&SynthGrammar::context_default(), 10, 1).unwrap();
        let v = train_bpe(&corpus, 80).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
        for i in 0..v.len() as u32 {
            assert_eq!(back.token_of(i), v.token_of(i));
            assert_eq!(back.id_of(v.token_of(i).unwrap()), Some(i));
        }
    }

    proptest! {
        #[test]
        fn encode_invariants_and_roundtrip(turns in prop::collection::vec("[a-e]{1,6}( [a-e]{1,6}){0,3}", 1..6), size in 9usize..60) {
            let refs: Vec<&str> = turns.iter().map(String::as_str).collect();
            let d = dialog(&refs);
            let v = train_bpe(&[d.clone()], size.max(4 + 10)).unwrap();
            let seq = encode_dialog(&d, &v).unwrap();
            prop_assert_eq!(decode(&seq.ids, &v).unwrap(), render_dialog(&d));
            prop_assert_eq!(seq.turn_starts(&v).len(), d.turns.len());
            prop_assert_eq!(seq.shift_label.iter().filter(|&&s| s).count(), d.turns.len() - 1);
            let n = seq.len();
            prop_assert!(!seq.eval_mask[n - 1]);
            for i in 0..n {
                if v.is_speaker(seq.ids[i]) { prop_assert!(!seq.eval_mask[i]); }
            }
        }
    }
}
