use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use turnlab::corpus::{self, parse_jsonl, synth_corpus, write_jsonl, Dialog, InputFormat, SegmentationConfig, SynthGrammar, Turn};
use turnlab::eval::{
    ablate_context, default_grid, evaluate_model, write_eval_csv, Encoded, EvalRow, PosScorer, ShiftScorer, TuneOn,
};
use turnlab::inspect::{
    aggregate_attention, integrated_gradients, select_targets, write_attribution_csv, AttentionScope, IgConfig,
};
use turnlab::models::{fit_pos_bigram, Checkpoint, LstmClassifier, LstmConfig, ModelKind, PosBigramTable, TransformerConfig, TransformerLM};
use turnlab::numerics::{Precision, Real};
use turnlab::project::{project_turn_end, write_histogram_csv, ProjectConfig};
use turnlab::tokenizer::{decode, encode_dialog, train_bpe, Vocab};
use turnlab::training::{train_lm, train_lstm, TrainConfig};

use crate::manifest::Run;
use crate::plot;
use crate::settings::Settings;

pub const TRP_CSV_HEADER: &str = "dialog_id,position,token,trp,shift";

/// Everything a subcommand needs: its settings and the run being recorded.
pub struct Ctx {
    pub settings: Settings,
    pub run: Run,
    pub seed: u64,
}

impl Ctx {
    fn path(&mut self, key: &str) -> Result<PathBuf> {
        let p: PathBuf = self.settings.get::<String>(key)?.into();
        self.run.input(&p)
    }

    fn dialogs(&mut self, key: &str) -> Result<Vec<Dialog>> {
        let p = self.path(key)?;
        read_dialogs(&p)
    }

    fn vocab(&mut self, key: &str) -> Result<Vocab> {
        let p = self.path(key)?;
        Ok(Vocab::from_json(&std::fs::read_to_string(&p)?)?)
    }

    fn checkpoint(&mut self, path: PathBuf) -> Result<Checkpoint> {
        let p = self.run.input(&path)?;
        Checkpoint::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> turnlab::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.run.write(name, &buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.run.write(name, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
    }
}

pub fn read_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_jsonl(BufReader::new(f), InputFormat::Turns, &SegmentationConfig::default()).with_context(|| format!("reading {}", path.display()))
}

fn dialogs_jsonl(ds: &[Dialog]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, ds)?;
    Ok(buf)
}

/// Writes `dialogs.jsonl`, plus `train/valid/test.jsonl` when `split.ratios`
/// is configured.
fn write_corpus(ctx: &mut Ctx, ds: &[Dialog]) -> Result<()> {
    ctx.run.write("dialogs.jsonl", &dialogs_jsonl(ds)?)?;
    if let Some(ratios) = ctx.settings.get_opt::<[f64; 3]>("split.ratios")? {
        let seed = ctx.settings.get_or("split.seed", ctx.seed)?;
        let sp = corpus::split(ds, ratios, seed)?;
        for (name, part) in [("train.jsonl", &sp.train), ("valid.jsonl", &sp.valid), ("test.jsonl", &sp.test)] {
            ctx.run.write(name, &dialogs_jsonl(part)?)?;
        }
    }
    Ok(())
}

pub fn ingest(ctx: &mut Ctx) -> Result<()> {
    let input = ctx.path("ingest.input")?;
    let format: InputFormat = ctx.settings.get_or("ingest.format", InputFormat::Turns)?;
    let seg = ctx.settings.section("segmentation", SegmentationConfig::default())?;
    let ds = corpus::ingest(&input, format, &seg)?;
    write_corpus(ctx, &ds)
}

pub fn synth(ctx: &mut Ctx) -> Result<()> {
    let n: usize = ctx.settings.get("synth.n")?;
    let grammar = match ctx.settings.get_opt::<String>("synth.grammar")? {
        Some(p) => {
            let p = ctx.run.input(Path::new(&p))?;
            serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing grammar {}", p.display()))?
        }
        None => SynthGrammar::context_default(),
    };
    let ds = synth_corpus(&grammar, n, ctx.seed)?;
    write_corpus(ctx, &ds)
}

/// Loads `tokenizer.vocab`, or trains one on the training dialogs and writes
/// it next to the model.
fn vocab_for_training(ctx: &mut Ctx, train: &[Dialog]) -> Result<Vocab> {
    if ctx.settings.has("tokenizer.vocab") {
        return ctx.vocab("tokenizer.vocab");
    }
    let size = ctx.settings.get_or("tokenizer.vocab_size", 500usize)?;
    let v = train_bpe(train, size)?;
    ctx.run.write("vocab.json", v.to_json()?.as_bytes())?;
    Ok(v)
}

fn encode_all(ds: &[Dialog], v: &Vocab) -> Result<Vec<Encoded>> {
    ds.iter().map(|d| Ok(Encoded { seq: encode_dialog(d, v)?, dialog: d.clone() })).collect()
}

fn train_setup(ctx: &mut Ctx) -> Result<(Vocab, Vec<Encoded>, Vec<Encoded>, TrainConfig)> {
    let train = ctx.dialogs("data.train")?;
    let valid = ctx.dialogs("data.valid")?;
    let vocab = vocab_for_training(ctx, &train)?;
    let seed = ctx.seed;
    let cfg = ctx.settings.section("train", TrainConfig { seed, ..TrainConfig::default() })?;
    cfg.validate()?;
    Ok((vocab.clone(), encode_all(&train, &vocab)?, encode_all(&valid, &vocab)?, cfg))
}

/// Transformer settings without the vocabulary size, which the vocabulary fixes.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct LmSettings {
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_ff: usize,
    ctx_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LstmSettings {
    d_embed: usize,
    hidden: usize,
    n_layers: usize,
}

pub fn train_lm_cmd(ctx: &mut Ctx) -> Result<()> {
    let (vocab, train, valid, cfg) = train_setup(ctx)?;
    let d = TransformerConfig::default();
    let m = ctx.settings.section(
        "model",
        LmSettings { n_layers: d.n_layers, n_heads: d.n_heads, d_model: d.d_model, d_ff: d.d_ff, ctx_len: d.ctx_len },
    )?;
    let config = TransformerConfig {
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        d_model: m.d_model,
        d_ff: m.d_ff,
        ctx_len: m.ctx_len,
        vocab_size: vocab.len(),
        dropout_p: cfg.dropout,
    };
    let seqs = |xs: &[Encoded]| xs.iter().map(|e| e.seq.clone()).collect::<Vec<_>>();
    fn go<T: Real>(config: TransformerConfig, tr: &[turnlab::tokenizer::TokenSeq], va: &[turnlab::tokenizer::TokenSeq], cfg: &TrainConfig, hash: &str) -> Result<(Checkpoint, turnlab::training::TrainLog)> {
        let (model, log) = train_lm(TransformerLM::<T>::init(config, cfg.seed)?, tr, va, cfg)?;
        let mut model = model;
        model.config.dropout_p = 0.0;
        Ok((Checkpoint::from_transformer(&model, hash)?, log))
    }
    let (ckpt, log) = match cfg.precision {
        Precision::F32 => go::<f32>(config, &seqs(&train), &seqs(&valid), &cfg, &vocab.hash())?,
        Precision::F64 => go::<f64>(config, &seqs(&train), &seqs(&valid), &cfg, &vocab.hash())?,
    };
    ctx.run.write("model.json", ckpt.to_json()?.as_bytes())?;
    ctx.csv("train_log.csv", |w| log.write_csv(w))
}

pub fn train_lstm_cmd(ctx: &mut Ctx) -> Result<()> {
    let (vocab, train, valid, cfg) = train_setup(ctx)?;
    let d = LstmConfig::default();
    let m = ctx.settings.section("lstm", LstmSettings { d_embed: d.d_embed, hidden: d.hidden, n_layers: d.n_layers })?;
    let config = LstmConfig { vocab_size: vocab.len(), d_embed: m.d_embed, hidden: m.hidden, n_layers: m.n_layers };
    let seqs = |xs: &[Encoded]| xs.iter().map(|e| e.seq.clone()).collect::<Vec<_>>();
    fn go<T: Real>(config: LstmConfig, tr: &[turnlab::tokenizer::TokenSeq], va: &[turnlab::tokenizer::TokenSeq], cfg: &TrainConfig, hash: &str) -> Result<(Checkpoint, turnlab::training::TrainLog)> {
        let (model, log) = train_lstm(LstmClassifier::<T>::init(config, cfg.seed)?, tr, va, cfg)?;
        Ok((Checkpoint::from_lstm(&model, hash)?, log))
    }
    let (ckpt, log) = match cfg.precision {
        Precision::F32 => go::<f32>(config, &seqs(&train), &seqs(&valid), &cfg, &vocab.hash())?,
        Precision::F64 => go::<f64>(config, &seqs(&train), &seqs(&valid), &cfg, &vocab.hash())?,
    };
    ctx.run.write("model.json", ckpt.to_json()?.as_bytes())?;
    ctx.csv("train_log.csv", |w| log.write_csv(w))
}

pub fn fit_pos(ctx: &mut Ctx) -> Result<()> {
    let train = ctx.dialogs("data.train")?;
    let alpha = ctx.settings.get_or("pos.alpha", 1.0)?;
    let table = fit_pos_bigram(&train, alpha)?;
    ctx.run.write("model.json", Checkpoint::from_pos(&table)?.to_json()?.as_bytes())
}

/// A loaded predictor at its stored precision.
pub enum Predictor {
    LmF32(TransformerLM<f32>),
    LmF64(TransformerLM<f64>),
    LstmF32(LstmClassifier<f32>),
    LstmF64(LstmClassifier<f64>),
    Pos(PosBigramTable),
}

impl Predictor {
    pub fn load(ckpt: &Checkpoint, vocab: &Vocab) -> Result<Self> {
        ckpt.check_vocab(&vocab.hash())?;
        let f64 = match ckpt.precision.as_str() {
            "f32" => false,
            "f64" => true,
            p => bail!("checkpoint: unknown precision {p:?}"),
        };
        Ok(match (ckpt.kind, f64) {
            (ModelKind::Transformer, false) => Predictor::LmF32(ckpt.transformer()?),
            (ModelKind::Transformer, true) => Predictor::LmF64(ckpt.transformer()?),
            (ModelKind::Lstm, false) => Predictor::LstmF32(ckpt.lstm()?),
            (ModelKind::Lstm, true) => Predictor::LstmF64(ckpt.lstm()?),
            (ModelKind::PosBigram, _) => Predictor::Pos(ckpt.pos()?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Predictor::LmF32(_) | Predictor::LmF64(_) => "transformer",
            Predictor::LstmF32(_) | Predictor::LstmF64(_) => "lstm",
            Predictor::Pos(_) => "pos",
        }
    }

    pub fn with<R>(&self, f: impl FnOnce(&dyn ShiftScorer) -> R) -> R {
        match self {
            Predictor::LmF32(m) => f(m),
            Predictor::LmF64(m) => f(m),
            Predictor::LstmF32(m) => f(m),
            Predictor::LstmF64(m) => f(m),
            Predictor::Pos(t) => f(&PosScorer(t)),
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `key` (a list of checkpoint paths) and names each model by kind,
/// numbering repeats.
fn predictors(ctx: &mut Ctx, key: &str, vocab: &Vocab) -> Result<Vec<(String, Predictor)>> {
    let paths: Vec<String> = ctx.settings.get(key)?;
    if paths.is_empty() {
        bail!("config key `{key}` lists no checkpoints");
    }
    let mut out: Vec<(String, Predictor)> = Vec::new();
    for p in paths {
        let ckpt = ctx.checkpoint(p.into())?;
        let pred = Predictor::load(&ckpt, vocab)?;
        let seen = out.iter().filter(|(n, _)| n.split('#').next() == Some(pred.name())).count();
        let name = if seen == 0 { pred.name().to_string() } else { format!("{}#{}", pred.name(), seen + 1) };
        out.push((name, pred));
    }
    Ok(out)
}

struct EvalInputs {
    vocab: Vocab,
    models: Vec<(String, Predictor)>,
    test: Vec<Dialog>,
    test_name: String,
    valid: Option<Vec<Dialog>>,
    tune: Vec<TuneOn>,
    train_name: String,
}

fn eval_inputs(ctx: &mut Ctx) -> Result<EvalInputs> {
    let vocab = ctx.vocab("data.vocab")?;
    let models = predictors(ctx, "eval.models", &vocab)?;
    let test_name = stem(Path::new(&ctx.settings.get::<String>("data.test")?));
    let test = ctx.dialogs("data.test")?;
    let valid = if ctx.settings.has("data.valid") { Some(ctx.dialogs("data.valid")?) } else { None };
    let default_tune = if valid.is_some() { vec![TuneOn::Valid, TuneOn::Test] } else { vec![TuneOn::Test] };
    let tune: Vec<TuneOn> = ctx.settings.get_or("eval.tune_on", default_tune)?;
    if tune.contains(&TuneOn::Valid) && valid.is_none() {
        bail!("missing config key `data.valid` (needed for eval.tune_on = \"valid\")");
    }
    let train_name = ctx.settings.get_or("eval.train_set", "train".to_string())?;
    Ok(EvalInputs { vocab, models, test, test_name, valid, tune, train_name })
}

pub fn eval(ctx: &mut Ctx) -> Result<()> {
    let inp = eval_inputs(ctx)?;
    let trp_dialogs = ctx.settings.get_or("eval.trp_dialogs", 1usize)?;
    let grid = default_grid();
    let test = encode_all(&inp.test, &inp.vocab)?;
    let valid = inp.valid.as_ref().map(|v| encode_all(v, &inp.vocab)).transpose()?;
    let mut rows = Vec::new();
    let mut trp = csv::Writer::from_writer(Vec::new());
    trp.write_record(TRP_CSV_HEADER.split(','))?;
    for (name, pred) in &inp.models {
        for &tune in &inp.tune {
            let report = pred.with(|s| evaluate_model(s, &test, valid.as_deref(), &grid, tune))?;
            rows.push(EvalRow { model: name.clone(), train_set: inp.train_name.clone(), test_set: inp.test_name.clone(), k: None, tune_on: tune, report });
        }
        for e in test.iter().take(trp_dialogs) {
            let p = pred.with(|s| s.shift_probs(&e.dialog, &e.seq))?;
            for (t, (&id, &shift)) in e.seq.ids.iter().zip(&e.seq.shift_label).enumerate() {
                let tok = inp.vocab.token_of(id).unwrap_or("?");
                trp.write_record([format!("{}/{name}", e.dialog.id), t.to_string(), tok.to_string(), p[t].to_string(), u8::from(shift).to_string()])?;
            }
        }
    }
    ctx.csv("eval.csv", |w| write_eval_csv(w, &rows))?;
    ctx.json("eval.json", &rows)?;
    let trp = trp.into_inner().map_err(|e| anyhow!("{e}"))?;
    ctx.run.write("trp.csv", &trp)
}

pub fn ablate(ctx: &mut Ctx) -> Result<()> {
    let inp = eval_inputs(ctx)?;
    let ks: Vec<usize> = ctx.settings.get_or("ablate.ks", vec![0usize, 1, 2, 3, 4])?;
    let grid = default_grid();
    let mut rows = Vec::new();
    for (name, pred) in &inp.models {
        for &tune in &inp.tune {
            let reports = pred.with(|s| ablate_context(s, &inp.test, inp.valid.as_deref(), &inp.vocab, &ks, &grid, tune))?;
            for (k, report) in reports {
                rows.push(EvalRow { model: name.clone(), train_set: inp.train_name.clone(), test_set: inp.test_name.clone(), k: Some(k), tune_on: tune, report });
            }
        }
    }
    ctx.csv("ablation.csv", |w| write_eval_csv(w, &rows))?;
    ctx.json("ablation.json", &rows)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct TargetSettings {
    trp_min: f64,
    n_dialogs: usize,
    per_dialog: usize,
}

/// The transformer under inspection, the encoded test dialogs and the
/// selected targets.
fn inspect_setup(ctx: &mut Ctx) -> Result<(Predictor, Vec<Encoded>, Vec<turnlab::inspect::Target>)> {
    let vocab = ctx.vocab("data.vocab")?;
    let path: String = ctx.settings.get("inspect.model")?;
    let ckpt = ctx.checkpoint(path.into())?;
    let pred = Predictor::load(&ckpt, &vocab)?;
    if pred.name() != "transformer" {
        bail!("checkpoint: inspect needs a transformer, got {}", pred.name());
    }
    let items = encode_all(&ctx.dialogs("data.test")?, &vocab)?;
    let ts = ctx.settings.section("targets", TargetSettings { trp_min: 0.2, n_dialogs: 500, per_dialog: 2 })?;
    let seed = ctx.seed;
    let targets = pred.with(|s| select_targets(s, &items, ts.trp_min, ts.n_dialogs, ts.per_dialog, seed))?;
    Ok((pred, items, targets))
}

pub fn inspect_attn(ctx: &mut Ctx) -> Result<()> {
    let (pred, items, targets) = inspect_setup(ctx)?;
    let scope: AttentionScope = ctx.settings.get_or("inspect.scope", AttentionScope::All)?;
    let rows = match &pred {
        Predictor::LmF32(m) => aggregate_attention(m, &items, &targets, scope)?,
        Predictor::LmF64(m) => aggregate_attention(m, &items, &targets, scope)?,
        _ => unreachable!(),
    };
    ctx.json("targets.json", &targets)?;
    ctx.csv("attention.csv", |w| write_attribution_csv(w, &rows))
}

pub fn inspect_ig(ctx: &mut Ctx) -> Result<()> {
    let (pred, items, targets) = inspect_setup(ctx)?;
    let cfg = ctx.settings.section("ig", IgConfig::default())?;
    let res = match &pred {
        Predictor::LmF32(m) => integrated_gradients(m, &items, &targets, &cfg)?,
        Predictor::LmF64(m) => integrated_gradients(m, &items, &targets, &cfg)?,
        _ => unreachable!(),
    };
    let rows: Vec<_> = res.iter().map(|r| r.attribution.clone()).collect();
    let mut resid = String::from("target_id,f_input,f_baseline,residual\n");
    for r in &res {
        resid += &format!("{},{},{},{}\n", r.attribution.target, r.f_input, r.f_baseline, r.residual);
    }
    ctx.json("targets.json", &targets)?;
    ctx.csv("ig.csv", |w| write_attribution_csv(w, &rows))?;
    ctx.run.write("ig_residuals.csv", resid.as_bytes())
}

/// Cuts a dialog inside its last turn, after `words` words (at least one,
/// and at least one word left to predict when the turn allows it).
fn prefix_dialog(d: &Dialog, words: usize) -> Result<Dialog> {
    let mut turns = d.turns.clone();
    let last = turns.pop().ok_or_else(|| anyhow!("dialog {} is empty", d.id))?;
    let keep = words.min(last.words.len().saturating_sub(1)).max(1);
    let cut = match &last.pos {
        Some(p) => Turn::tagged(last.speaker, last.words[..keep].to_vec(), p[..keep].to_vec()),
        None => Turn::new(last.speaker, last.words[..keep].to_vec()),
    };
    turns.push(cut);
    Ok(Dialog::new(d.id.clone(), turns)?)
}

pub fn project(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab("data.vocab")?;
    let path: String = ctx.settings.get("project.model")?;
    let ckpt = ctx.checkpoint(path.into())?;
    let pred = Predictor::load(&ckpt, &vocab)?;
    let dialogs = ctx.dialogs("data.test")?;
    let seed = ctx.seed;
    let cfg = ctx.settings.section("sampling", ProjectConfig { seed, ..ProjectConfig::default() })?;
    let n_prefixes = ctx.settings.get_or("project.n_prefixes", 5usize)?;
    let prefix_words = ctx.settings.get_or("project.prefix_words", 2usize)?;
    let mut hists = Vec::new();
    let mut samples = String::new();
    for d in dialogs.iter().take(n_prefixes) {
        let pd = prefix_dialog(d, prefix_words)?;
        let seq = encode_dialog(&pd, &vocab)?;
        let h = match &pred {
            Predictor::LmF32(m) => project_turn_end(m, &d.id, &seq, &cfg)?,
            Predictor::LmF64(m) => project_turn_end(m, &d.id, &seq, &cfg)?,
            _ => bail!("checkpoint: project needs a transformer, got {}", pred.name()),
        };
        for s in &h.samples {
            samples += &format!("{}\t{} || {}\n", d.id, pd.turns.last().map(|t| t.text()).unwrap_or_default(), decode(s, &vocab)?);
        }
        hists.push(h);
    }
    ctx.csv("histogram.csv", |w| write_histogram_csv(w, &hists))?;
    if cfg.keep_samples > 0 {
        ctx.run.write("samples.txt", samples.as_bytes())?;
    }
    Ok(())
}

pub fn plot(ctx: &mut Ctx) -> Result<()> {
    let input = ctx.path("plot.input")?;
    let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let svg = plot::render(&text)?;
    ctx.run.write(&format!("{}.svg", stem(&input)), svg.as_bytes())
}
