use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use flipkit_core::corpus::{dataset_stats, load_corpus, trigger_distance_histogram, Corpus, Stats, TaskId};
use flipkit_core::embed::{encode_corpus, read_cache, speaker_coverage, EmbeddingTable, EncoderConfig, Provider, SpeakerVocab};
use flipkit_core::eval::{
    ablate_ptz, format_report, mask_predictions, neutral_baseline, rule_based_baseline, score_emotions,
    score_triggers, MetricsReport,
};
use flipkit_core::ptz::{format_skew_table, skew_report, SkewReport};
use flipkit_core::runner::{
    load_checkpoint, predict_efr, predict_erc, save_checkpoint, train_efr, train_erc, Checkpoint, TrainConfig,
    TrainOutcome,
};

use crate::{
    BaselineArgs, BaselineKind, Cli, Command, EmbedArgs, EvalArgs, PredictArgs, PredictEfrArgs, StatsArgs, TrainArgs,
    TrainEfrArgs,
};

/// Bad command-line usage detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<flipkit_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Stats(a) => stats(cli, a),
        Command::Embed(a) => embed(a),
        Command::TrainErc(a) => train(cli, a, None),
        Command::TrainEfr(a) => train(cli, &a.train, Some(a)),
        Command::PredictErc(a) => predict_emotions(a),
        Command::PredictEfr(a) => predict_triggers(cli, a),
        Command::Eval(a) => evaluate(cli, a),
        Command::Baseline(a) => baseline(cli, a),
        Command::AblatePtz(a) => ablate(cli, a),
    }
}

fn task(id: u8) -> Result<TaskId> {
    Ok(TaskId::new(id)?)
}

fn load(id: u8, path: &Path) -> Result<Corpus> {
    let corpus = load_corpus(path, task(id)?).with_context(|| format!("reading {}", path.display()))?;
    log::info!("{}: {} entries, {} utterances", path.display(), corpus.dialogues.len(), corpus.num_utterances());
    Ok(corpus)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn table(cli: &Cli, text: &str) {
    if !cli.quiet {
        eprint!("{text}");
    }
}

#[derive(Debug, Serialize)]
struct StatsOutput {
    task: TaskId,
    stats: Stats,
    top_speakers: Vec<String>,
    speaker_coverage: f64,
    skew: Option<SkewReport>,
    trigger_distances: Option<BTreeMap<usize, u64>>,
}

fn stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    if a.window == 0 {
        return Err(usage("--window must be at least 1"));
    }
    let corpus = load(a.input.task, &a.input.data)?;
    let vocab = SpeakerVocab::from_corpus(&corpus, a.top_speakers);
    let flips = corpus.task.is_flip_reasoning();
    let skew = flips.then(|| skew_report(&corpus, a.window, a.ptz));
    if let Some(s) = &skew {
        table(cli, &format_skew_table(s));
    }
    let out = StatsOutput {
        task: corpus.task,
        stats: dataset_stats(&corpus),
        speaker_coverage: speaker_coverage(&corpus, &vocab),
        top_speakers: vocab.top,
        skew,
        trigger_distances: flips.then(|| trigger_distance_histogram(&corpus)),
    };
    emit(&out, a.out.output.as_deref())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let corpus = load(a.input.task, &a.input.data)?;
    let mut cfg = EncoderConfig::for_task(corpus.task);
    if let Some(p) = &a.provider {
        let provider: Provider = p.parse()?;
        if provider == Provider::Stub {
            cfg = EncoderConfig::stub(a.dim.unwrap_or(cfg.dim), cfg.pooling, 0);
        }
        cfg.provider = provider;
    }
    if a.dim.is_some() && cfg.provider != Provider::Stub {
        return Err(usage("--dim applies to the stub provider only"));
    }
    if let Some(m) = &a.model {
        cfg.model = m.clone();
    }
    if let Some(n) = a.parallelism {
        cfg.parallelism = n.max(1);
    }
    let table = encode_corpus(&corpus, &cfg, &a.cache)?;
    let out = json!({
        "cache": a.cache,
        "entries": table.len(),
        "dim": table.dim,
        "provider": table.provider,
        "model": table.model,
    });
    emit(&out, a.out.output.as_deref())
}

fn read_table(path: &Path) -> Result<EmbeddingTable> {
    read_cache(path).with_context(|| format!("reading embeddings {}", path.display()))
}

fn train_config(cli: &Cli, task: TaskId, a: &TrainArgs, efr: Option<&TrainEfrArgs>) -> Result<TrainConfig> {
    let mut overrides = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<Value>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => json!({}),
    };
    if !overrides.is_object() {
        return Err(usage("the config file must hold a JSON object"));
    }
    let mut set = |key: &str, value: Value| {
        overrides[key] = value;
    };
    if let Some(s) = cli.seed {
        set("seed", json!(s));
    }
    if let Some(v) = a.epochs {
        set("epochs", json!(v));
    }
    if let Some(v) = a.learning_rate {
        set("learning_rate", json!(v));
    }
    if let Some(v) = a.batch_size {
        set("batch_size", json!(v));
    }
    if let Some(v) = a.val_fraction {
        set("val_fraction", json!(v));
    }
    if let Some(v) = a.eval_every {
        set("eval_every", json!(v));
    }
    if let Some(e) = efr {
        let mut patch = serde_json::Map::new();
        if let Some(m) = e.ptz_mask {
            patch.insert("ptz_mask".into(), json!(m.enabled()));
        }
        if let Some(w) = e.window {
            patch.insert("window".into(), json!(w));
        }
        if !patch.is_empty() {
            flipkit_core::runner::merge_json(&mut overrides, &json!({ "efr": patch }));
        }
    }
    Ok(TrainConfig::from_json_overrides(task, &overrides)?)
}

fn train(cli: &Cli, a: &TrainArgs, efr: Option<&TrainEfrArgs>) -> Result<()> {
    let task_id = task(a.input.task)?;
    match (efr.is_some(), task_id.is_flip_reasoning()) {
        (false, true) => return Err(usage("train-erc needs --task 1")),
        (true, false) => return Err(usage("train-efr needs --task 2 or 3")),
        _ => {}
    }
    let cfg = train_config(cli, task_id, a, efr)?;
    let corpus = load(a.input.task, &a.input.data)?;
    let embeddings = read_table(&a.cache)?;
    let outcome: TrainOutcome = if efr.is_some() {
        train_efr(&corpus, &embeddings, &cfg)?
    } else {
        train_erc(&corpus, &embeddings, &cfg)?
    };
    save_checkpoint(&outcome.checkpoint, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut lines = String::new();
    for record in &outcome.log {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    fs::write(&log_path, lines).with_context(|| format!("writing {}", log_path.display()))?;
    let h = &outcome.checkpoint.header;
    log::info!("best epoch {} ({} metric {:.4})", h.best_epoch, h.selected_on, h.best_metric);
    emit(
        &json!({
            "checkpoint": a.out,
            "log": log_path,
            "epochs": outcome.log.len(),
            "best_epoch": h.best_epoch,
            "best_metric": h.best_metric,
            "selected_on": h.selected_on,
            "numeric_mode": h.numeric_mode,
            "validation_episodes": h.validation_episodes,
        }),
        None,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct EmotionPrediction {
    episode: String,
    emotions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TriggerPrediction {
    episode: String,
    triggers: Vec<f64>,
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn predict_emotions(a: &PredictArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.ckpt)?;
    let corpus = load(ckpt.header.train.task.get(), &a.data)?;
    let labels = predict_erc(&ckpt, &corpus, &read_table(&a.cache)?)?;
    let out: Vec<EmotionPrediction> = corpus
        .dialogues
        .iter()
        .zip(labels)
        .map(|(d, emotions)| EmotionPrediction {
            episode: d.id.clone(),
            emotions,
        })
        .collect();
    emit(&out, a.out.output.as_deref())
}

fn trigger_rows(corpus: &Corpus, decisions: &[Vec<u8>]) -> Vec<TriggerPrediction> {
    corpus
        .dialogues
        .iter()
        .zip(decisions)
        .map(|(d, t)| TriggerPrediction {
            episode: d.id.clone(),
            triggers: t.iter().map(|&x| f64::from(x)).collect(),
        })
        .collect()
}

fn predict_triggers(cli: &Cli, a: &PredictEfrArgs) -> Result<()> {
    let p = &a.predict;
    let ckpt = open_checkpoint(&p.ckpt)?;
    let corpus = load(ckpt.header.train.task.get(), &p.data)?;
    let mask = a.ptz_mask.map_or(ckpt.header.train.efr.ptz_mask, |m| m.enabled());
    let pred = predict_efr(&ckpt, &corpus, &read_table(&p.cache)?, mask)?;
    if !cli.quiet {
        eprintln!("zone masking {}: {} positive decisions masked", if mask { "on" } else { "off" }, pred.mask_count);
    }
    emit(&trigger_rows(&corpus, &pred.decisions), p.out.output.as_deref())
}

fn read_predictions<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing predictions {}", path.display()))
}

fn check_ids<'a>(corpus: &Corpus, ids: impl Iterator<Item = &'a str>) {
    for (i, (d, id)) in corpus.dialogues.iter().zip(ids).enumerate() {
        if d.id != id {
            log::warn!("prediction {i} is for episode {id:?} but the gold entry is {:?}", d.id);
            return;
        }
    }
}

fn binary(values: &[f64], entry: usize) -> Result<Vec<u8>> {
    values
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            x => Err(usage(format!("prediction {entry} has trigger value {x}, expected 0 or 1"))),
        })
        .collect()
}

fn evaluate(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let corpus = load(a.task, &a.gold)?;
    let report: MetricsReport = if corpus.task.is_flip_reasoning() {
        let rows: Vec<TriggerPrediction> = read_predictions(&a.pred)?;
        check_ids(&corpus, rows.iter().map(|r| r.episode.as_str()));
        let mut decisions = rows
            .iter()
            .enumerate()
            .map(|(i, r)| binary(&r.triggers, i))
            .collect::<Result<Vec<_>>>()?;
        if a.ptz_mask.enabled() {
            if decisions.len() != corpus.dialogues.len() {
                return Err(usage(format!(
                    "{} entries but {} predictions",
                    corpus.dialogues.len(),
                    decisions.len()
                )));
            }
            decisions = mask_predictions(&corpus, &decisions);
        }
        score_triggers(&corpus, &decisions)?
    } else {
        if a.ptz_mask.enabled() {
            return Err(usage("--ptz-mask applies to trigger predictions only"));
        }
        let rows: Vec<EmotionPrediction> = read_predictions(&a.pred)?;
        check_ids(&corpus, rows.iter().map(|r| r.episode.as_str()));
        let labels: Vec<Vec<String>> = rows.into_iter().map(|r| r.emotions).collect();
        score_emotions(&corpus, &labels)?
    };
    table(cli, &format_report(&report));
    emit(&report, a.out.output.as_deref())
}

fn baseline(cli: &Cli, a: &BaselineArgs) -> Result<()> {
    let corpus = load(a.input.task, &a.input.data)?;
    let report = match (a.kind, corpus.task.is_flip_reasoning()) {
        (BaselineKind::Neutral, false) => neutral_baseline(&corpus)?,
        (BaselineKind::Rule, true) => rule_based_baseline(&corpus)?,
        (BaselineKind::Neutral, true) => return Err(usage("the neutral baseline needs --task 1")),
        (BaselineKind::Rule, false) => return Err(usage("the rule baseline needs --task 2 or 3")),
    };
    table(cli, &format_report(&report));
    emit(&report, a.out.output.as_deref())
}

fn ablate(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.ckpt)?;
    let corpus = load(ckpt.header.train.task.get(), &a.data)?;
    let pred = predict_efr(&ckpt, &corpus, &read_table(&a.cache)?, false)?;
    let result = ablate_ptz(&corpus, &pred.decisions)?;
    table(
        cli,
        &format!(
            "zone masking: F1 {:.2} -> {:.2} ({:+.2}), {} positive decisions masked\n",
            100.0 * result.f1_off,
            100.0 * result.f1_on,
            100.0 * result.change,
            result.mask_count
        ),
    );
    emit(&result, a.out.output.as_deref())
}
