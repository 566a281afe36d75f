//! Template grammar for synthetic dialogs with context-dependent turn ends.
//!
//! A dialog is a sequence of exchanges; an exchange is a sequence of turn
//! templates; a template alternative is a list of slots: `$CATEGORY` (a word
//! drawn from the category, tagged with its tag), `^CATEGORY` (a non-empty
//! suffix of the words most recently drawn from the category), `~CATEGORY`
//! (up to three words of the category that were not in that draw, then one
//! that was) or `word/TAG`. A turn entry `base@CATEGORY` picks the template
//! list `base.<word>` named by the latest draw of the category, or a random
//! word of it when nothing has been drawn yet.
//!
//! The default grammar reuses the same opening words for complete short
//! answers ("tomorrow" after "when will you meet again") and for longer turns
//! ("tomorrow we met in the park"), so whether a turn ends can only be told
//! from the previous turn.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dialog, Speaker, Turn};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub tag: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub name: String,
    pub weight: f64,
    pub turns: Vec<String>,
    /// At least one turn's end is only predictable from an earlier turn.
    #[serde(default)]
    pub context_dependent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGrammar {
    pub categories: BTreeMap<String, Category>,
    pub turns: BTreeMap<String, Vec<Vec<String>>>,
    pub exchanges: Vec<Exchange>,
    /// Inclusive range of exchanges per dialog.
    pub exchanges_per_dialog: [usize; 2],
}

type Draws = BTreeMap<String, Vec<String>>;

enum Slot<'a> {
    Category(&'a str, &'a Category),
    Echo(&'a str, &'a Category),
    Probe(&'a str, &'a Category),
    Literal(&'a str, &'a str),
}

impl SynthGrammar {
    fn slot<'a>(&'a self, s: &'a str) -> Result<Slot<'a>> {
        let category = |name: &'a str| -> Result<&'a Category> {
            let cat = self.categories.get(name).ok_or_else(|| Error::Grammar(format!("unknown category {name}")))?;
            if cat.words.is_empty() {
                return Err(Error::Grammar(format!("category {name} has no words")));
            }
            Ok(cat)
        };
        if let Some(name) = s.strip_prefix('$') {
            return Ok(Slot::Category(name, category(name)?));
        }
        if let Some(name) = s.strip_prefix('^') {
            return Ok(Slot::Echo(name, category(name)?));
        }
        if let Some(name) = s.strip_prefix('~') {
            return Ok(Slot::Probe(name, category(name)?));
        }
        match s.rsplit_once('/') {
            Some((word, tag)) if !word.is_empty() && !tag.is_empty() => Ok(Slot::Literal(word, tag)),
            _ => Err(Error::Grammar(format!("literal slot {s:?} must look like word/TAG"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.exchanges_per_dialog;
        if lo == 0 || lo > hi {
            return Err(Error::Grammar(format!("exchanges_per_dialog {lo}..={hi} is empty or zero")));
        }
        if self.exchanges.is_empty() {
            return Err(Error::Grammar("no exchanges".into()));
        }
        let mut terminals = 0;
        for ex in &self.exchanges {
            if !(ex.weight > 0.0) {
                return Err(Error::Grammar(format!("exchange {} has non-positive weight", ex.name)));
            }
            if ex.turns.is_empty() {
                return Err(Error::Grammar(format!("exchange {} has no turns", ex.name)));
            }
            let mut names = Vec::new();
            for name in &ex.turns {
                match name.split_once('@') {
                    Some((base, cat)) => {
                        let c = self.categories.get(cat).ok_or_else(|| Error::Grammar(format!("{name}: unknown category {cat}")))?;
                        if c.words.is_empty() {
                            return Err(Error::Grammar(format!("category {cat} has no words")));
                        }
                        names.extend(c.words.iter().map(|w| format!("{base}.{w}")));
                    }
                    None => names.push(name.clone()),
                }
            }
            for name in &names {
                let alts = self.turns.get(name).ok_or_else(|| Error::Grammar(format!("unknown turn template {name}")))?;
                if alts.is_empty() || alts.iter().any(Vec::is_empty) {
                    return Err(Error::Grammar(format!("turn template {name} has an empty alternative")));
                }
                for slot in alts.iter().flatten() {
                    self.slot(slot)?;
                    terminals += 1;
                }
            }
        }
        if terminals == 0 {
            return Err(Error::Grammar("no terminals".into()));
        }
        if !self.exchanges.iter().any(|e| e.context_dependent) {
            return Err(Error::Grammar("no context-dependent exchange".into()));
        }
        Ok(())
    }

    fn pick_exchange<R: Rng>(&self, rng: &mut R, only_context: bool) -> &Exchange {
        let pool: Vec<&Exchange> = self.exchanges.iter().filter(|e| !only_context || e.context_dependent).collect();
        let total: f64 = pool.iter().map(|e| e.weight).sum();
        let mut x = rng.random::<f64>() * total;
        for e in &pool {
            if x < e.weight {
                return e;
            }
            x -= e.weight;
        }
        pool[pool.len() - 1]
    }

    /// Template named by an exchange entry. `base@CATEGORY` picks
    /// `base.<word>` for the latest word drawn from the category, or any of
    /// them when nothing was drawn yet.
    fn resolve<R: Rng>(&self, entry: &str, prev: &Draws, rng: &mut R) -> String {
        let Some((base, cat)) = entry.split_once('@') else { return entry.to_string() };
        let word = match prev.get(cat).and_then(|d| d.last()) {
            Some(w) => w.clone(),
            None => {
                let words = &self.categories[cat].words;
                words[rng.random_range(0..words.len())].clone()
            }
        };
        format!("{base}.{word}")
    }

    /// Words, tags and per-category draws of one turn. `prev` holds the
    /// latest draws of each category earlier in the dialog.
    fn realize<R: Rng>(&self, template: &str, prev: &Draws, rng: &mut R) -> Result<(Vec<String>, Vec<String>, Draws)> {
        let alts = &self.turns[template];
        let alt = &alts[rng.random_range(0..alts.len())];
        let mut words = Vec::with_capacity(alt.len());
        let mut tags = Vec::with_capacity(alt.len());
        let mut draws = Draws::new();
        for s in alt {
            match self.slot(s)? {
                Slot::Category(name, c) => {
                    let w = c.words[rng.random_range(0..c.words.len())].clone();
                    draws.entry(name.to_string()).or_default().push(w.clone());
                    words.push(w);
                    tags.push(c.tag.clone());
                }
                Slot::Echo(name, c) | Slot::Probe(name, c) => {
                    let said = prev
                        .get(name)
                        .filter(|d| !d.is_empty())
                        .ok_or_else(|| Error::Grammar(format!("{template}: {s} without earlier draws")))?;
                    let picked: Vec<String> = if s.starts_with('^') {
                        said[rng.random_range(0..said.len())..].to_vec()
                    } else {
                        let misses: Vec<&String> = c.words.iter().filter(|w| !said.contains(w)).collect();
                        let n = if misses.is_empty() { 0 } else { rng.random_range(0..=3) };
                        let mut out: Vec<String> = (0..n).map(|_| misses[rng.random_range(0..misses.len())].clone()).collect();
                        out.push(said[rng.random_range(0..said.len())].clone());
                        out
                    };
                    for w in picked {
                        words.push(w);
                        tags.push(c.tag.clone());
                    }
                }
                Slot::Literal(w, t) => {
                    words.push(w.to_string());
                    tags.push(t.to_string());
                }
            }
        }
        Ok((words, tags, draws))
    }

    /// Question/answer dialogs modelled on "when will you meet again" /
    /// "tomorrow", plus read-back exchanges where the listener repeats the
    /// tail of a code, right away or after a short hold, and stops at its
    /// last item. Mode exchanges draw a word that later decides whether a
    /// report answer is short or detailed. One-turn remarks swap which
    /// speaker asks, so the speaker alone does not give the role away.
    pub fn context_default() -> Self {
        let cat = |tag: &str, words: &[&str]| Category {
            tag: tag.into(),
            words: words.iter().map(|w| w.to_string()).collect(),
        };
        let categories = BTreeMap::from([
            ("TIME".into(), cat("ADV", &["tomorrow", "today", "tonight", "yesterday", "later"])),
            ("PLACE".into(), cat("NOUN", &["park", "office", "station", "cafe", "library", "market"])),
            ("VPAST".into(), cat("VERB", &["met", "walked", "talked", "waited", "ate"])),
            ("VBASE".into(), cat("VERB", &["meet", "walk", "talk", "wait", "eat"])),
            ("ACK".into(), cat("INTJ", &["okay", "sure", "right", "great", "fine"])),
            ("NAME".into(), cat("PROPN", &["anna", "bob", "carl", "dana", "erik"])),
            ("MODE".into(), cat("ADJ", &["brief", "detailed"])),
            ("EVENT".into(), cat("NOUN", &["trip", "party", "meeting", "concert"])),
            ("EVAL".into(), cat("ADJ", &["fine", "good", "bad", "great", "boring"])),
            ("THING".into(), cat("NOUN", &["books", "coffee", "music", "films", "tea"])),
            (
                "ITEM".into(),
                cat(
                    "X",
                    &[
                        "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
                        "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
                        "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
                    ],
                ),
            ),
        ]);
        let alt = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let turns = BTreeMap::from([
            (
                "statement".into(),
                vec![
                    alt("$TIME we/PRON $VPAST in/ADP the/DET $PLACE"),
                    alt("$TIME i/PRON $VPAST with/ADP $NAME"),
                ],
            ),
            ("name_statement".into(), vec![alt("$NAME $VPAST at/ADP the/DET $PLACE"), alt("$NAME and/CCONJ i/PRON $VPAST")]),
            ("when_q".into(), vec![alt("when/ADV will/AUX you/PRON $VBASE again/ADV"), alt("when/ADV can/AUX we/PRON $VBASE")]),
            ("time_answer".into(), vec![alt("$TIME")]),
            ("who_q".into(), vec![alt("who/PRON did/AUX you/PRON $VBASE with/ADP")]),
            ("name_answer".into(), vec![alt("$NAME")]),
            ("where_q".into(), vec![alt("where/ADV did/AUX you/PRON $VBASE")]),
            ("where_when_q".into(), vec![alt("where/ADV and/CCONJ when/ADV did/AUX you/PRON $VBASE")]),
            ("place_answer".into(), vec![alt("in/ADP the/DET $PLACE")]),
            ("place_time_answer".into(), vec![alt("in/ADP the/DET $PLACE $TIME")]),
            ("ack".into(), vec![alt("$ACK")]),
            ("ack_long".into(), vec![alt("$ACK i/PRON see/VERB"), alt("$ACK that/PRON is/AUX nice/ADJ")]),
            ("like".into(), vec![alt("i/PRON like/VERB $THING"), alt("do/AUX you/PRON like/VERB $THING")]),
            (
                "code".into(),
                vec![
                    alt("the/DET code/NOUN is/AUX $ITEM $ITEM over/INTJ"),
                    alt("the/DET code/NOUN is/AUX $ITEM $ITEM $ITEM over/INTJ"),
                    alt("the/DET code/NOUN is/AUX $ITEM $ITEM $ITEM $ITEM over/INTJ"),
                    alt("the/DET code/NOUN is/AUX $ITEM $ITEM $ITEM $ITEM $ITEM over/INTJ"),
                    alt("the/DET code/NOUN is/AUX $ITEM $ITEM $ITEM $ITEM $ITEM $ITEM over/INTJ"),
                ],
            ),
            ("code_echo".into(), vec![alt("^ITEM")]),
            ("code_guess".into(), vec![alt("~ITEM")]),
            ("hold".into(), vec![alt("one/NUM moment/NOUN please/INTJ"), alt("wait/VERB a/DET second/NOUN")]),
            ("go_on".into(), vec![alt("go/VERB ahead/ADV"), alt("take/VERB your/PRON time/NOUN")]),
            ("remark".into(), vec![alt("hmm/INTJ let/VERB me/PRON think/VERB"), alt("by/ADP the/DET way/NOUN")]),
            ("mode_set".into(), vec![alt("please/INTJ keep/VERB it/PRON $MODE"), alt("i/PRON want/VERB it/PRON $MODE")]),
            ("report_q".into(), vec![alt("how/ADV was/AUX the/DET $EVENT"), alt("what/PRON about/ADP the/DET $EVENT")]),
            ("report_a.brief".into(), vec![alt("$EVAL")]),
            ("report_a.detailed".into(), vec![alt("$EVAL the/DET $THING was/AUX $EVAL"), alt("$EVAL we/PRON $VPAST a/DET lot/NOUN")]),
        ]);
        let ex = |name: &str, weight: f64, turns: &[&str], context_dependent: bool| Exchange {
            name: name.into(),
            weight,
            turns: turns.iter().map(|t| t.to_string()).collect(),
            context_dependent,
        };
        Self {
            categories,
            turns,
            exchanges: vec![
                ex("when", 2.0, &["when_q", "time_answer"], true),
                ex("who", 1.5, &["who_q", "name_answer"], true),
                ex("where_when", 1.5, &["where_when_q", "place_time_answer"], true),
                ex("where", 1.5, &["where_q", "place_answer"], false),
                ex("tell", 2.0, &["statement", "ack"], true),
                ex("tell_name", 1.0, &["name_statement", "ack_long"], true),
                ex("like", 1.0, &["like", "ack"], false),
                ex("echo", 1.0, &["code", "code_echo"], true),
                ex("guess", 2.0, &["code", "code_guess"], true),
                ex("guess_later", 1.5, &["code", "hold", "go_on", "code_guess"], true),
                ex("remark", 2.0, &["remark"], false),
                ex("mode", 1.0, &["mode_set", "ack"], false),
                ex("report", 2.0, &["report_q", "report_a@MODE"], true),
            ],
            exchanges_per_dialog: [3, 5],
        }
    }
}

/// Samples `n` dialogs. Dialog `i` depends only on `(seed, i)`, and every
/// dialog contains at least one context-dependent exchange.
pub fn synth_corpus(grammar: &SynthGrammar, n: usize, seed: u64) -> Result<Vec<Dialog>> {
    grammar.validate()?;
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let [lo, hi] = grammar.exchanges_per_dialog;
            let count = r.random_range(lo..=hi);
            let mut exchanges: Vec<&Exchange> = (0..count).map(|_| grammar.pick_exchange(&mut r, false)).collect();
            if !exchanges.iter().any(|e| e.context_dependent) {
                let slot = r.random_range(0..count);
                exchanges[slot] = grammar.pick_exchange(&mut r, true);
            }
            let mut turns = Vec::new();
            let mut speaker = Speaker::A;
            let mut prev = Draws::new();
            for ex in exchanges {
                for entry in &ex.turns {
                    let template = grammar.resolve(entry, &prev, &mut r);
                    let (words, tags, draws) = grammar.realize(&template, &prev, &mut r)?;
                    turns.push(Turn::tagged(speaker, words, tags));
                    speaker = speaker.other();
                    prev.extend(draws);
                }
            }
            Dialog::new(format!("synth-{seed}-{i:05}"), turns)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dialogs() {
        assert!(synth_corpus(&SynthGrammar::context_default(), 0, 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let g = SynthGrammar::context_default();
        let a = synth_corpus(&g, 5, 11).unwrap();
        assert_eq!(a, synth_corpus(&g, 5, 11).unwrap());
        let b = synth_corpus(&g, 5, 12).unwrap();
        let words = |ds: &[Dialog]| ds.iter().map(|d| d.turns.iter().map(Turn::text).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_ne!(words(&a), words(&b));
        // prefix stability
        assert_eq!(a[..3], synth_corpus(&g, 3, 11).unwrap()[..]);
    }

    #[test]
    fn dialogs_are_tagged_and_alternate() {
        for d in synth_corpus(&SynthGrammar::context_default(), 50, 3).unwrap() {
            assert!(d.is_tagged());
            assert!(d.turns.windows(2).all(|w| w[0].speaker != w[1].speaker));
        }
    }

    fn only(names: &[&str]) -> SynthGrammar {
        let mut g = SynthGrammar::context_default();
        g.exchanges.retain(|e| names.contains(&e.name.as_str()));
        g
    }

    /// Items between "the code is" and "over".
    fn code(t: &Turn) -> Option<&[String]> {
        t.words.starts_with(&["the".to_string(), "code".to_string()]).then(|| &t.words[3..t.words.len() - 1])
    }

    #[test]
    fn echo_repeats_a_suffix() {
        let mut seen = 0;
        for d in synth_corpus(&only(&["echo"]), 30, 5).unwrap() {
            for w in d.turns.windows(2) {
                if let Some(items) = code(&w[0]) {
                    assert!(items.ends_with(&w[1].words) && !w[1].words.is_empty());
                    seen += 1;
                }
            }
        }
        assert!(seen > 50);
    }

    #[test]
    fn guess_ends_on_the_first_hit() {
        for d in synth_corpus(&only(&["guess"]), 30, 6).unwrap() {
            for w in d.turns.windows(2) {
                if let Some(items) = code(&w[0]) {
                    let (last, misses) = w[1].words.split_last().unwrap();
                    assert!(items.contains(last));
                    assert!(misses.len() <= 3 && misses.iter().all(|m| !items.contains(m)));
                }
            }
        }
    }

    #[test]
    fn category_suffix_follows_the_latest_draw() {
        let mut modes = BTreeMap::new();
        for d in synth_corpus(&only(&["mode", "report"]), 40, 7).unwrap() {
            let mut mode: Option<String> = None;
            for w in d.turns.windows(2) {
                if let Some(m) = ["brief", "detailed"].into_iter().find(|m| w[0].words.last().map(String::as_str) == Some(*m)) {
                    mode = Some(m.to_string());
                }
                let opening = w[0].words.iter().take(2).map(String::as_str).collect::<Vec<_>>();
                if opening == ["how", "was"] || opening == ["what", "about"] {
                    if let Some(m) = &mode {
                        assert_eq!(w[1].words.len() == 1, m == "brief", "{:?}", w[1].words);
                        *modes.entry(m.clone()).or_insert(0) += 1;
                    }
                }
            }
        }
        assert_eq!(modes.len(), 2);
    }

    #[test]
    fn category_suffix_is_validated() {
        let mut g = only(&["report"]);
        g.exchanges[0].turns[1] = "report_a@NOPE".into();
        assert!(synth_corpus(&g, 1, 1).unwrap_err().to_string().contains("unknown category NOPE"));
        let mut g = only(&["report"]);
        g.turns.remove("report_a.brief");
        assert!(synth_corpus(&g, 1, 1).unwrap_err().to_string().contains("report_a.brief"));
    }

    #[test]
    fn degenerate_grammars_rejected() {
        let mut g = SynthGrammar::context_default();
        for c in g.categories.values_mut() {
            c.words.clear();
        }
        assert!(matches!(synth_corpus(&g, 1, 1), Err(Error::Grammar(_))));

        let empty = SynthGrammar {
            categories: BTreeMap::new(),
            turns: BTreeMap::from([("t".into(), vec![])]),
            exchanges: vec![Exchange { name: "e".into(), weight: 1.0, turns: vec!["t".into()], context_dependent: true }],
            exchanges_per_dialog: [1, 1],
        };
        assert!(matches!(synth_corpus(&empty, 1, 1), Err(Error::Grammar(_))));

        let mut g = SynthGrammar::context_default();
        g.exchanges.iter_mut().for_each(|e| e.context_dependent = false);
        assert!(matches!(synth_corpus(&g, 1, 1), Err(Error::Grammar(_))));
    }
}
