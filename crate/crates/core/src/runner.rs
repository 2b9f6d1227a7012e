//! Training loops, Adam, checkpoints and batch prediction for both models.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    class_weights, conversation_groups, make_efr_instances, split_sequences, trigger_class_weights, Corpus,
    EfrInstance, TaskId, WeightMode,
};
use crate::efr_net::{build_inputs, decide, restrict_to_zone, EfrConfig, EfrInput, EfrModel, HistoryScope};
use crate::embed::{require_complete, EmbeddingTable, SpeakerVocab, DEFAULT_TOP_SPEAKERS};
use crate::erc_net::{gold_labels, AttentionValues, ErcConfig, ErcInput, ErcModel, SpeakerFeedback};
use crate::error::{Error, Result};
use crate::eval::{classification_report, score_triggers};
use crate::nn::{Gradients, ParamStore, Tape, Var};

pub const NUMERIC_MODE: &str = "single_threaded";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    WeightedF1,
    PositiveF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErcHyper {
    pub hidden_dim: usize,
    pub hops: usize,
    pub dropout: f64,
    pub seq_len: usize,
    pub attention_values: AttentionValues,
    pub speaker_feedback: SpeakerFeedback,
}

impl Default for ErcHyper {
    fn default() -> Self {
        let c = ErcConfig::new(0, 0, 0);
        ErcHyper {
            hidden_dim: c.hidden_dim,
            hops: c.hops,
            dropout: c.dropout,
            seq_len: c.seq_len,
            attention_values: c.attention_values,
            speaker_feedback: c.speaker_feedback,
        }
    }
}

impl ErcHyper {
    pub fn config(&self, embedding_dim: usize, speakers: usize, num_classes: usize) -> ErcConfig {
        ErcConfig {
            hidden_dim: self.hidden_dim,
            hops: self.hops,
            dropout: self.dropout,
            seq_len: self.seq_len,
            attention_values: self.attention_values,
            speaker_feedback: self.speaker_feedback,
            ..ErcConfig::new(embedding_dim, speakers, num_classes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EfrHyper {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub history_dim: usize,
    pub window: usize,
    pub dropout: f64,
    pub history_scope: HistoryScope,
    pub restrict_to_ptz: bool,
    /// Mask decisions to the trigger zone during validation and, by default,
    /// prediction.
    pub ptz_mask: bool,
}

impl Default for EfrHyper {
    fn default() -> Self {
        let c = EfrConfig::new(0, 0, 0);
        EfrHyper {
            model_dim: c.model_dim,
            layers: c.layers,
            heads: c.heads,
            ff_dim: c.ff_dim,
            history_dim: c.history_dim,
            window: c.window,
            dropout: c.dropout,
            history_scope: c.history_scope,
            restrict_to_ptz: c.restrict_to_ptz,
            ptz_mask: false,
        }
    }
}

impl EfrHyper {
    pub fn config(&self, embedding_dim: usize, speakers: usize, num_emotions: usize) -> EfrConfig {
        EfrConfig {
            model_dim: self.model_dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            history_dim: self.history_dim,
            window: self.window,
            dropout: self.dropout,
            history_scope: self.history_scope,
            restrict_to_ptz: self.restrict_to_ptz,
            ..EfrConfig::new(embedding_dim, speakers, num_emotions)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskId,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_mode: WeightMode,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validate (and possibly keep a new best checkpoint) every this many
    /// epochs; the final epoch is always validated.
    pub eval_every: usize,
    pub val_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub selection: SelectionMetric,
    pub top_speakers: usize,
    pub erc: ErcHyper,
    pub efr: EfrHyper,
}

pub const DEFAULT_SEED: u64 = 20240224;

impl TrainConfig {
    pub fn for_task(task: TaskId) -> Self {
        let (learning_rate, batch_size, epochs, weight_mode) = match task.get() {
            1 => (1e-4, 64, 100, WeightMode::InverseSqrt),
            2 => (5e-7, 2000, 1000, WeightMode::Inverse),
            _ => (5e-7, 1000, 1000, WeightMode::Inverse),
        };
        TrainConfig {
            task,
            learning_rate,
            batch_size,
            epochs,
            weight_mode,
            weight_decay: 1e-5,
            seed: DEFAULT_SEED,
            eval_every: 1,
            val_fraction: 0.1,
            clip_norm: Some(1.0),
            selection: if task.is_flip_reasoning() {
                SelectionMetric::PositiveF1
            } else {
                SelectionMetric::WeightedF1
            },
            top_speakers: DEFAULT_TOP_SPEAKERS,
            erc: ErcHyper::default(),
            efr: EfrHyper::default(),
        }
    }

    /// Task defaults overlaid with the fields present in `overrides`.
    /// Nested objects are merged field by field.
    pub fn from_json_overrides(task: TaskId, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_task(task))?;
        merge_json(&mut base, overrides);
        base["task"] = serde_json::to_value(task)?;
        let cfg: TrainConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Invalid("epochs, batch_size and eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Invalid(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.weight_decay < 0.0 || self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Invalid("weight_decay must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`.
pub fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Mean over positions of `-weights[gold] * log softmax(logits)[gold]`.
pub fn weighted_ce_loss(tape: &mut Tape, logits: Var, gold: &[usize], weights: &[f64]) -> Result<Var> {
    if tape.value(logits).iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN in logits".into()));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= weights.len() || g >= tape.shape(logits).1) {
        return Err(Error::Invalid(format!("gold label {g} outside the class range")));
    }
    Ok(tape.weighted_cross_entropy(logits, gold, weights))
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.values().iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        let step_size = self.learning_rate / bc1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(&grads.grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let denom = v.sqrt() / bc2.sqrt() + eps;
                *p -= step_size * *m / denom;
            });
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub wall_seconds: f64,
    pub numeric_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelConfig {
    Erc(ErcConfig),
    Efr(EfrConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub label_set: Vec<String>,
    pub vocab: SpeakerVocab,
    pub embedding_dim: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// `"validation"`, or `"training"` when the validation split is empty.
    pub selected_on: String,
    pub validation_episodes: Vec<String>,
    pub numeric_mode: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FKCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, `u32` version, `u64` header length, JSON header, then each
/// tensor in header order as row-major `f64` little-endian.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = ckpt.header.clone();
    header.tensors = ckpt
        .params
        .names()
        .iter()
        .zip(ckpt.params.values())
        .map(|(name, v)| TensorEntry {
            name: name.clone(),
            rows: v.nrows(),
            cols: v.ncols(),
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 20 + 8 * ckpt.params.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in ckpt.params.values() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
    let json = body.get(..len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let mut rest = &body[len..];
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let chunk = rest.get(..8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Array2::from_shape_vec((t.rows, t.cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.insert(t.name.clone(), value);
        rest = &rest[8 * n..];
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, params })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Seeded split of conversations (entries of one conversation stay
/// together). Returns `(train, validation)` entry indices in file order.
pub fn split_train_validation(corpus: &Corpus, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let groups = conversation_groups(corpus);
    let mut reps: Vec<usize> = groups.clone();
    reps.sort_unstable();
    reps.dedup();
    reps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((reps.len() as f64 * fraction).round() as usize).min(reps.len().saturating_sub(1));
    let val: std::collections::HashSet<usize> = reps[..n_val].iter().copied().collect();
    (0..corpus.dialogues.len()).partition(|i| !val.contains(&groups[*i]))
}

struct Unit<I> {
    input: I,
    gold: Vec<usize>,
}

trait Trainable {
    type Input;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn logits(&self, tape: &mut Tape, input: &Self::Input, rng: Option<&mut ChaCha8Rng>) -> Result<Var>;
}

impl Trainable for ErcModel {
    type Input = ErcInput;
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn logits(&self, tape: &mut Tape, input: &ErcInput, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.forward(tape, input, rng, None)
    }
}

impl Trainable for EfrModel {
    type Input = EfrInput;
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn logits(&self, tape: &mut Tape, input: &EfrInput, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        Ok(self.forward(tape, input, rng)?.logits)
    }
}

struct FitResult {
    best: ParamStore,
    best_epoch: usize,
    best_metric: f64,
    log: Vec<EpochRecord>,
}

fn fit<M: Trainable>(
    model: &mut M,
    units: &[Unit<M::Input>],
    weights: &[f64],
    cfg: &TrainConfig,
    mut validate: impl FnMut(&M) -> Result<f64>,
) -> Result<FitResult> {
    if units.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(model.store(), cfg.learning_rate, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut best: Option<(ParamStore, usize, f64)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_positions = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let positions: usize = batch.iter().map(|&i| units[i].gold.len()).sum();
            let mut grads = Gradients::zeros_like(model.store());
            for &i in batch {
                let unit = &units[i];
                let mut tape = Tape::new(model.store());
                let logits = model.logits(&mut tape, &unit.input, Some(&mut dropout_rng))?;
                let loss = weighted_ce_loss(&mut tape, logits, &unit.gold, weights)
                    .map_err(|e| Error::NonFinite(format!("epoch {epoch}, step {step}: {e}")))?;
                let value = tape.value(loss)[[0, 0]];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("epoch {epoch}, step {step}: loss {value}")));
                }
                epoch_loss += value * unit.gold.len() as f64;
                epoch_positions += unit.gold.len();
                let scaled = tape.scale(loss, unit.gold.len() as f64 / positions as f64);
                tape.backward_into(scaled, &mut grads);
            }
            if let Some(max) = cfg.clip_norm {
                let norm = grads.global_norm();
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!("epoch {epoch}, step {step}: gradient norm {norm}")));
                }
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            adam.step(model.store_mut(), &grads);
        }
        let train_loss = epoch_loss / epoch_positions as f64;

        let val_metric = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let metric = validate(model)?;
            if best.as_ref().is_none_or(|b| metric > b.2) {
                best = Some((model.store().clone(), epoch, metric));
            }
            Some(metric)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_metric,
            wall_seconds: start.elapsed().as_secs_f64(),
            numeric_mode: NUMERIC_MODE.to_string(),
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.6}{}",
            val_metric.map_or(String::new(), |m| format!(", selection metric {m:.4}"))
        );
        log.push(record);
    }
    let (best, best_epoch, best_metric) = best.expect("the final epoch is always validated");
    Ok(FitResult {
        best,
        best_epoch,
        best_metric,
        log,
    })
}

fn erc_units(corpus: &Corpus, indices: &[usize], table: &EmbeddingTable, vocab: &SpeakerVocab, seq_len: usize) -> Result<Vec<Unit<ErcInput>>> {
    let mut units = Vec::new();
    for &i in indices {
        for chunk in split_sequences(&corpus.dialogues[i], seq_len) {
            units.push(Unit {
                input: ErcInput::from_dialogue(&chunk, table, vocab)?,
                gold: gold_labels(&chunk, &corpus.label_set)?,
            });
        }
    }
    Ok(units)
}

fn erc_weighted_f1(model: &ErcModel, units: &[Unit<ErcInput>], labels: &[String]) -> Result<f64> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for u in units {
        pred.extend(model.predict(&u.input)?);
        gold.extend_from_slice(&u.gold);
    }
    Ok(classification_report(&gold, &pred, labels)?.weighted_f1)
}

fn selection_ids(corpus: &Corpus, val: &[usize]) -> Vec<String> {
    val.iter().map(|&i| corpus.dialogues[i].id.clone()).collect()
}

/// Trains the recognition model on `corpus` and keeps the best epoch.
pub fn train_erc(corpus: &Corpus, table: &EmbeddingTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_complete(corpus, table)?;
    let vocab = SpeakerVocab::from_corpus(corpus, cfg.top_speakers);
    let labels = corpus.label_set.clone();
    let model_cfg = cfg.erc.config(table.dim, vocab.k, labels.len());
    let mut model = ErcModel::new(model_cfg.clone(), cfg.seed)?;
    let weights = class_weights(corpus, cfg.weight_mode)?;
    let (train, val) = split_train_validation(corpus, cfg.val_fraction, cfg.seed);
    let train_units = erc_units(corpus, &train, table, &vocab, model_cfg.seq_len)?;
    let val_units = erc_units(corpus, &val, table, &vocab, model_cfg.seq_len)?;
    let selected_on = if val_units.is_empty() { "training" } else { "validation" };
    let fit = fit(&mut model, &train_units, &weights, cfg, |m| {
        let units = if val_units.is_empty() { &train_units } else { &val_units };
        erc_weighted_f1(m, units, &labels)
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            header: CheckpointHeader {
                model: ModelConfig::Erc(model_cfg),
                train: cfg.clone(),
                label_set: labels,
                vocab,
                embedding_dim: table.dim,
                best_epoch: fit.best_epoch,
                best_metric: fit.best_metric,
                selected_on: selected_on.into(),
                validation_episodes: selection_ids(corpus, &val),
                numeric_mode: NUMERIC_MODE.into(),
                tensors: Vec::new(),
            },
            params: fit.best,
        },
        log: fit.log,
    })
}

fn efr_instances(corpus: &Corpus, hyper: &EfrHyper) -> Result<Vec<EfrInstance>> {
    let instances = make_efr_instances(corpus, hyper.window)?;
    Ok(if hyper.restrict_to_ptz {
        instances.iter().map(restrict_to_zone).collect()
    } else {
        instances
    })
}

fn efr_units(
    instances: &[EfrInstance],
    table: &EmbeddingTable,
    vocab: &SpeakerVocab,
    labels: &[String],
    scope: HistoryScope,
) -> Result<Vec<Unit<EfrInput>>> {
    instances
        .iter()
        .map(|inst| {
            Ok(Unit {
                input: build_inputs(inst, table, vocab, labels, scope)?,
                gold: inst.trigger_labels.iter().map(|&t| usize::from(t)).collect(),
            })
        })
        .collect()
}

/// Expands window decisions to full-entry decisions; positions before the
/// window are non-triggers.
fn expand(corpus: &Corpus, instances: &[EfrInstance], decisions: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = corpus.dialogues.iter().map(|d| vec![0u8; d.len()]).collect();
    for (inst, dec) in instances.iter().zip(decisions) {
        let row = &mut out[inst.dialogue_index];
        row[inst.window_offset..inst.window_offset + dec.len()].copy_from_slice(dec);
    }
    out
}

fn efr_decisions(model: &EfrModel, units: &[Unit<EfrInput>], ptz_mask: bool) -> Result<Vec<Vec<u8>>> {
    units
        .iter()
        .map(|u| Ok(model.predict(&u.input, ptz_mask)?.decisions))
        .collect()
}

/// Trains the trigger model on a flip-reasoning corpus and keeps the best
/// epoch.
pub fn train_efr(corpus: &Corpus, table: &EmbeddingTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_complete(corpus, table)?;
    let vocab = SpeakerVocab::from_corpus(corpus, cfg.top_speakers);
    let labels = corpus.label_set.clone();
    let model_cfg = cfg.efr.config(table.dim, vocab.k, labels.len());
    let mut model = EfrModel::new(model_cfg.clone(), cfg.seed)?;

    let instances = efr_instances(corpus, &cfg.efr)?;
    let weights = trigger_class_weights(&instances, cfg.weight_mode)?;
    let (train, val) = split_train_validation(corpus, cfg.val_fraction, cfg.seed);
    let (val_set, train_set) = if val.is_empty() { (&train, &train) } else { (&val, &train) };
    let in_set = |set: &[usize]| -> Vec<EfrInstance> {
        instances
            .iter()
            .filter(|inst| set.binary_search(&inst.dialogue_index).is_ok())
            .cloned()
            .collect()
    };
    let train_instances = in_set(train_set);
    let val_instances = in_set(val_set);
    let train_units = efr_units(&train_instances, table, &vocab, &labels, model_cfg.history_scope)?;
    let val_units = efr_units(&val_instances, table, &vocab, &labels, model_cfg.history_scope)?;
    // Validation scores whole entries, so re-index instances into the
    // validation sub-corpus.
    let val_corpus = corpus.subset(val_set);
    let val_instances: Vec<EfrInstance> = val_instances
        .into_iter()
        .map(|mut inst| {
            inst.dialogue_index = val_set.binary_search(&inst.dialogue_index).expect("instance in set");
            inst
        })
        .collect();
    let ptz_mask = cfg.efr.ptz_mask;
    let fit = fit(&mut model, &train_units, &weights, cfg, |m| {
        let decisions = efr_decisions(m, &val_units, ptz_mask)?;
        let report = score_triggers(&val_corpus, &expand(&val_corpus, &val_instances, &decisions))?;
        Ok(match cfg.selection {
            SelectionMetric::PositiveF1 => report.positive.map_or(0.0, |p| p.f1),
            SelectionMetric::WeightedF1 => report.weighted_f1,
        })
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            header: CheckpointHeader {
                model: ModelConfig::Efr(model_cfg),
                train: cfg.clone(),
                label_set: labels,
                vocab,
                embedding_dim: table.dim,
                best_epoch: fit.best_epoch,
                best_metric: fit.best_metric,
                selected_on: if val.is_empty() { "training" } else { "validation" }.into(),
                validation_episodes: selection_ids(corpus, &val),
                numeric_mode: NUMERIC_MODE.into(),
                tensors: Vec::new(),
            },
            params: fit.best,
        },
        log: fit.log,
    })
}

impl Checkpoint {
    pub fn erc_model(&self) -> Result<ErcModel> {
        match &self.header.model {
            ModelConfig::Erc(c) => ErcModel::with_params(c.clone(), &self.params),
            ModelConfig::Efr(_) => Err(Error::Invalid("checkpoint holds a trigger model".into())),
        }
    }

    pub fn efr_model(&self) -> Result<EfrModel> {
        match &self.header.model {
            ModelConfig::Efr(c) => EfrModel::with_params(c.clone(), &self.params),
            ModelConfig::Erc(_) => Err(Error::Invalid("checkpoint holds a recognition model".into())),
        }
    }

    fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if table.dim != self.header.embedding_dim {
            return Err(Error::DimMismatch {
                expected: self.header.embedding_dim,
                found: table.dim,
            });
        }
        Ok(())
    }
}

/// Per-utterance emotion labels for every episode of `corpus`.
pub fn predict_erc(ckpt: &Checkpoint, corpus: &Corpus, table: &EmbeddingTable) -> Result<Vec<Vec<String>>> {
    ckpt.check_table(table)?;
    require_complete(corpus, table)?;
    let model = ckpt.erc_model()?;
    let labels = &ckpt.header.label_set;
    corpus
        .dialogues
        .iter()
        .map(|d| {
            let mut out = Vec::with_capacity(d.len());
            for chunk in split_sequences(d, model.config.seq_len) {
                let input = ErcInput::from_dialogue(&chunk, table, &ckpt.header.vocab)?;
                out.extend(model.predict(&input)?.into_iter().map(|k| labels[k].clone()));
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPredictions {
    /// One decision per utterance of each entry.
    pub decisions: Vec<Vec<u8>>,
    /// Per-entry `[P(non-trigger), P(trigger)]` over the window only.
    pub window_probabilities: Vec<Vec<[f64; 2]>>,
    pub mask_count: u64,
}

/// Full-entry trigger decisions for every entry of `corpus`.
pub fn predict_efr(ckpt: &Checkpoint, corpus: &Corpus, table: &EmbeddingTable, ptz_mask: bool) -> Result<TriggerPredictions> {
    ckpt.check_table(table)?;
    require_complete(corpus, table)?;
    let model = ckpt.efr_model()?;
    let hyper = EfrHyper {
        window: model.config.window,
        restrict_to_ptz: model.config.restrict_to_ptz,
        ..EfrHyper::default()
    };
    let instances = efr_instances(corpus, &hyper)?;
    let mut decisions = Vec::with_capacity(instances.len());
    let mut window_probabilities = vec![Vec::new(); corpus.dialogues.len()];
    let mut mask_count = 0;
    for inst in &instances {
        let input = build_inputs(inst, table, &ckpt.header.vocab, &ckpt.header.label_set, model.config.history_scope)?;
        let mut tape = Tape::new(&model.store);
        let out = model.forward(&mut tape, &input, None)?;
        let probs = tape.softmax_rows(out.logits);
        let pred = decide(tape.value(probs), &input, ptz_mask);
        mask_count += pred.mask_count() as u64;
        window_probabilities[inst.dialogue_index] = pred.probabilities;
        decisions.push(pred.decisions);
    }
    Ok(TriggerPredictions {
        decisions: expand(corpus, &instances, &decisions),
        window_probabilities,
        mask_count,
    })
}
