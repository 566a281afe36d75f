//! JSON-lines corpus files, one dialog per line.
//!
//! `turns`: `{"id": str, "turns": [{"speaker": "A"|"B", "text": str, "pos": [str] (optional)}]}`
//!
//! `timed`: `{"id": str, "utterances": [{"speaker": "A"|"B", "start": f, "end": f, "text": str}]}`

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{merge_same_speaker, normalize_text, segment, Dialog, RawUtterance, SegmentationConfig, Speaker, Turn};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Turns,
    Timed,
}

#[derive(Serialize, Deserialize)]
struct TurnsRecord {
    id: String,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pos: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct TimedRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Deserialize)]
struct UtteranceRecord {
    speaker: String,
    start: f64,
    end: f64,
    text: String,
}

pub fn ingest(path: &Path, format: InputFormat, cfg: &SegmentationConfig) -> Result<Vec<Dialog>> {
    parse_jsonl(BufReader::new(File::open(path)?), format, cfg)
}

pub fn parse_jsonl<R: BufRead>(reader: R, format: InputFormat, cfg: &SegmentationConfig) -> Result<Vec<Dialog>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let err = |msg: String| Error::Record { line: lineno, msg };
        let dialog = match format {
            InputFormat::Turns => {
                let rec: TurnsRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
                turns_record(rec).map_err(|e| err(e.to_string()))?
            }
            InputFormat::Timed => {
                let rec: TimedRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
                timed_record(rec, cfg).map_err(|e| err(e.to_string()))?
            }
        };
        out.push(dialog);
    }
    Ok(out)
}

fn speaker(label: &str) -> Result<Speaker> {
    Speaker::parse(label).ok_or_else(|| Error::InvalidUtterance(format!("unknown speaker label {label:?}")))
}

fn turns_record(rec: TurnsRecord) -> Result<Dialog> {
    let mut turns = Vec::with_capacity(rec.turns.len());
    for t in rec.turns {
        let speaker = speaker(&t.speaker)?;
        let words = normalize_text(&t.text);
        if let Some(pos) = &t.pos {
            if pos.len() != words.len() {
                return Err(Error::InvalidUtterance(format!(
                    "{} POS tags for {} normalized words in {:?}",
                    pos.len(),
                    words.len(),
                    t.text
                )));
            }
        }
        if !words.is_empty() {
            turns.push(Turn { speaker, words, pos: t.pos, start_s: None, end_s: None });
        }
    }
    Dialog::new(rec.id, merge_same_speaker(turns))
}

fn timed_record(rec: TimedRecord, cfg: &SegmentationConfig) -> Result<Dialog> {
    let utts = rec
        .utterances
        .into_iter()
        .map(|u| RawUtterance::new(speaker(&u.speaker)?, u.start, u.end, u.text))
        .collect::<Result<Vec<_>>>()?;
    segment(&utts, cfg, &rec.id)
}

/// Writes dialogs in the `turns` schema (times are not kept).
pub fn write_jsonl<W: Write>(mut w: W, dialogs: &[Dialog]) -> Result<()> {
    for d in dialogs {
        let rec = TurnsRecord {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| TurnRecord {
                    speaker: format!("{:?}", t.speaker),
                    text: t.text(),
                    pos: t.pos.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, f: InputFormat) -> Result<Vec<Dialog>> {
        parse_jsonl(s.as_bytes(), f, &SegmentationConfig::default())
    }

    #[test]
    fn turns_record_maps_directly() {
        let ds = parse(r#"{"id":"x","turns":[{"speaker":"A","text":"Hi!"},{"speaker":"B","text":"Hello there."}]}"#, InputFormat::Turns)
            .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].turns[1].words, vec!["hello", "there"]);
    }

    #[test]
    fn accidental_same_speaker_turns_are_merged() {
        let ds = parse(
            r#"{"id":"x","turns":[{"speaker":"A","text":"a","pos":["X"]},{"speaker":"A","text":"b","pos":["Y"]},{"speaker":"B","text":"c","pos":["Z"]}]}"#,
            InputFormat::Turns,
        )
        .unwrap();
        assert_eq!(ds[0].turns.len(), 2);
        assert_eq!(ds[0].turns[0].text(), "a b");
        assert_eq!(ds[0].turns[0].pos.as_deref(), Some(&["X".to_string(), "Y".to_string()][..]));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let src = "{\"id\":\"ok\",\"turns\":[{\"speaker\":\"A\",\"text\":\"a\"}]}\n{not json}\n";
        assert!(matches!(parse(src, InputFormat::Turns), Err(Error::Record { line: 2, .. })));
        let src = "\n{\"id\":\"x\",\"turns\":[{\"speaker\":\"C\",\"text\":\"a\"}]}";
        let err = parse(src, InputFormat::Turns).unwrap_err();
        assert!(matches!(err, Error::Record { line: 2, .. }));
        assert!(err.to_string().contains("unknown speaker"));
    }

    #[test]
    fn misaligned_tags_rejected() {
        let src = r#"{"id":"x","turns":[{"speaker":"A","text":"a b","pos":["X"]}]}"#;
        assert!(parse(src, InputFormat::Turns).is_err());
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse("", InputFormat::Turns).unwrap().is_empty());
        assert!(parse("\n\n", InputFormat::Timed).unwrap().is_empty());
    }

    #[test]
    fn write_then_parse_roundtrips() {
        let d = Dialog::new(
            "r",
            vec![
                Turn::tagged(Speaker::B, vec!["so".into()], vec!["ADV".into()]),
                Turn::tagged(Speaker::A, vec!["yes".into(), "ok".into()], vec!["INTJ".into(), "INTJ".into()]),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&d)).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap(), InputFormat::Turns).unwrap();
        assert_eq!(back, vec![d]);
    }
}
