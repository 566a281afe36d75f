//! `turnlab`: the experiment pipeline as subcommands.
//!
//! Every run reads an optional TOML config, applies flag and `--set`
//! overrides, writes its outputs into `--out` and records a `manifest.json`
//! there. Errors go to stderr prefixed with `turnlab: error:`.

mod commands;
mod manifest;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::commands::Ctx;
use crate::manifest::Run;
use crate::settings::Settings;

pub const ERROR_PREFIX: &str = "turnlab: error:";

#[derive(Parser)]
#[command(name = "turnlab", version, about = "Turn-shift prediction experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (config key `out`, default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (config key `seed`, default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (config key `threads`; all cores when unset).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Read a JSONL corpus (turns or timed utterances) and write it normalized.
    Ingest {
        /// `ingest.input`
        #[arg(long)]
        input: Option<PathBuf>,
        /// `ingest.format`: turns or timed
        #[arg(long)]
        format: Option<String>,
    },
    /// Sample synthetic context-dependent dialogs.
    Synth {
        /// `synth.n`
        #[arg(long)]
        n: Option<usize>,
        /// `synth.grammar`: JSON grammar file
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Train the transformer language model.
    TrainLm(TrainArgs),
    /// Train the LSTM shift classifier.
    TrainLstm(TrainArgs),
    /// Count POS bigrams on the training dialogs.
    FitPos {
        /// `data.train`
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// bAcc of one or more checkpoints on a test set.
    Eval(EvalArgs),
    /// bAcc as a function of the number of context turns.
    Ablate {
        #[command(flatten)]
        eval: EvalArgs,
        /// `ablate.ks`
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Attention mass per turn before true shifts.
    InspectAttn(ModelArgs),
    /// Integrated gradients per turn before true shifts.
    InspectIg(ModelArgs),
    /// Sampled number of tokens until the current turn ends.
    Project(ModelArgs),
    /// Render a CSV written by another subcommand as SVG.
    Plot {
        /// `plot.input`
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `data.train`
    #[arg(long)]
    train: Option<PathBuf>,
    /// `data.valid`
    #[arg(long)]
    valid: Option<PathBuf>,
    /// `tokenizer.vocab`: reuse a vocabulary instead of training one
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// `eval.models`: checkpoint, repeatable
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// `data.test`
    #[arg(long)]
    test: Option<PathBuf>,
    /// `data.valid`
    #[arg(long)]
    valid: Option<PathBuf>,
    /// `data.vocab`
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// transformer checkpoint (`inspect.model` or `project.model`)
    #[arg(long)]
    model: Option<PathBuf>,
    /// `data.test`
    #[arg(long)]
    test: Option<PathBuf>,
    /// `data.vocab`
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn path(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

fn paths(ps: &[PathBuf]) -> Option<Value> {
    (!ps.is_empty()).then(|| Value::Array(ps.iter().map(|p| Value::String(p.display().to_string())).collect()))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth { .. } => "synth",
            Command::TrainLm(_) => "train-lm",
            Command::TrainLstm(_) => "train-lstm",
            Command::FitPos { .. } => "fit-pos",
            Command::Eval(_) => "eval",
            Command::Ablate { .. } => "ablate",
            Command::InspectAttn(_) => "inspect-attn",
            Command::InspectIg(_) => "inspect-ig",
            Command::Project(_) => "project",
            Command::Plot { .. } => "plot",
        }
    }

    /// Config keys set by this subcommand's flags.
    fn overrides(&self) -> Vec<(&'static str, Option<Value>)> {
        let eval = |e: &EvalArgs| {
            vec![("eval.models", paths(&e.models)), ("data.test", path(&e.test)), ("data.valid", path(&e.valid)), ("data.vocab", path(&e.vocab))]
        };
        let model = |key, m: &ModelArgs| vec![(key, path(&m.model)), ("data.test", path(&m.test)), ("data.vocab", path(&m.vocab))];
        match self {
            Command::Ingest { input, format } => vec![("ingest.input", path(input)), ("ingest.format", format.clone().map(Value::String))],
            Command::Synth { n, grammar } => vec![("synth.n", n.map(|n| Value::Integer(n as i64))), ("synth.grammar", path(grammar))],
            Command::TrainLm(t) | Command::TrainLstm(t) => {
                vec![("data.train", path(&t.train)), ("data.valid", path(&t.valid)), ("tokenizer.vocab", path(&t.vocab))]
            }
            Command::FitPos { train } => vec![("data.train", path(train))],
            Command::Eval(e) => eval(e),
            Command::Ablate { eval: e, ks } => {
                let mut v = eval(e);
                v.push(("ablate.ks", (!ks.is_empty()).then(|| Value::Array(ks.iter().map(|&k| Value::Integer(k as i64)).collect()))));
                v
            }
            Command::InspectAttn(m) | Command::InspectIg(m) => model("inspect.model", m),
            Command::Project(m) => model("project.model", m),
            Command::Plot { input } => vec![("plot.input", path(input))],
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common.clone();
    let mut settings = Settings::load(common.config.as_deref())?;
    for (key, value) in cli.command.overrides() {
        if let Some(v) = value {
            settings.set(key, v)?;
        }
    }
    if let Some(out) = &common.out {
        settings.set("out", Value::String(out.display().to_string()))?;
    }
    if let Some(seed) = common.seed {
        settings.set("seed", Value::Integer(seed as i64))?;
    }
    if let Some(t) = common.threads {
        settings.set("threads", Value::Integer(t as i64))?;
    }
    for pair in &common.set {
        settings.assign(pair)?;
    }
    let seed: u64 = settings.get_or("seed", 0u64)?;
    if let Some(t) = settings.get_opt::<usize>("threads")? {
        rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global().context("configuring threads")?;
    }
    let out: String = settings.get_or("out", "out".to_string())?;
    let name = cli.command.name();
    let mut ctx = Ctx { settings, run: Run::new(out.into())?, seed };
    match cli.command {
        Command::Ingest { .. } => commands::ingest(&mut ctx),
        Command::Synth { .. } => commands::synth(&mut ctx),
        Command::TrainLm(_) => commands::train_lm_cmd(&mut ctx),
        Command::TrainLstm(_) => commands::train_lstm_cmd(&mut ctx),
        Command::FitPos { .. } => commands::fit_pos(&mut ctx),
        Command::Eval(_) => commands::eval(&mut ctx),
        Command::Ablate { .. } => commands::ablate(&mut ctx),
        Command::InspectAttn(_) => commands::inspect_attn(&mut ctx),
        Command::InspectIg(_) => commands::inspect_ig(&mut ctx),
        Command::Project(_) => commands::project(&mut ctx),
        Command::Plot { .. } => commands::plot(&mut ctx),
    }?;
    let Ctx { settings, run, .. } = ctx;
    run.finish(name, settings.snapshot()?, seed)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{ERROR_PREFIX} {e:#}");
            ExitCode::FAILURE
        }
    }
}
