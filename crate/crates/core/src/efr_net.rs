//! Trigger classifier for emotion flips.
//!
//! Each window utterance is represented as `embedding ++ speaker one-hot ++
//! emotion one-hot`, projected to the model width, given sinusoidal position
//! encodings and contextualized by a bidirectional transformer encoder. A GRU
//! over the emotion sequence yields an emotion-history vector. Every position
//! is classified from `(its contextual vector, the target's contextual vector,
//! the history vector)` with a 2-way softmax.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EfrInstance;
use crate::embed::{emotion_one_hot, speaker_one_hot, EmbeddingTable, SpeakerVocab};
use crate::error::{Error, Result};
use crate::nn::{dropout, sinusoidal_positions, Gru, LayerNorm, Linear, MultiHeadSelfAttention, ParamStore, Tape, Var};
use crate::ptz::{apply_ptz_mask, ptz_for_speakers, PtzRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryScope {
    /// Emotion GRU runs over the window only.
    Window,
    /// Emotion GRU runs over the whole episode up to the target.
    Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfrConfig {
    pub embedding_dim: usize,
    pub speakers: usize,
    pub num_emotions: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub history_dim: usize,
    pub window: usize,
    pub dropout: f64,
    pub history_scope: HistoryScope,
    /// Train and predict on the zone-restricted window only (ablation).
    pub restrict_to_ptz: bool,
}

impl EfrConfig {
    pub fn new(embedding_dim: usize, speakers: usize, num_emotions: usize) -> Self {
        EfrConfig {
            embedding_dim,
            speakers,
            num_emotions,
            model_dim: 256,
            layers: 1,
            heads: 4,
            ff_dim: 1024,
            history_dim: 64,
            window: 5,
            dropout: 0.1,
            history_scope: HistoryScope::Window,
            restrict_to_ptz: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embedding_dim + self.speakers + self.num_emotions
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim(),
            self.model_dim,
            self.layers,
            self.heads,
            self.ff_dim,
            self.history_dim,
            self.window,
            self.num_emotions,
        ];
        if dims.contains(&0) {
            return Err(Error::Invalid("flip model dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Model input for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EfrInput {
    /// `window x input_dim` rows of `embedding ++ speaker ++ emotion`.
    pub features: Array2<f64>,
    /// Emotion one-hots fed to the history GRU.
    pub history: Array2<f64>,
    pub zone: PtzRange,
    pub window_offset: usize,
}

impl EfrInput {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Zone of an instance's target, in episode indices.
pub fn instance_zone(instance: &EfrInstance) -> PtzRange {
    ptz_for_speakers(&instance.episode_speakers, instance.target_episode_index())
}

/// Cuts an instance's window down to the part inside its zone.
pub fn restrict_to_zone(instance: &EfrInstance) -> EfrInstance {
    let zone = instance_zone(instance);
    let skip = zone.start.saturating_sub(instance.window_offset).min(instance.target_index);
    EfrInstance {
        window_offset: instance.window_offset + skip,
        window: instance.window[skip..].to_vec(),
        target_index: instance.target_index - skip,
        trigger_labels: instance.trigger_labels[skip..].to_vec(),
        ..instance.clone()
    }
}

fn emotion_row(label: Option<&str>, instance: &EfrInstance, position: usize, label_set: &[String]) -> Result<Vec<f64>> {
    let label = label.ok_or_else(|| Error::Validation {
        episode: instance.dialogue_id.clone(),
        message: format!("utterance {position} has no emotion label"),
    })?;
    emotion_one_hot(label, label_set)
}

pub fn build_inputs(
    instance: &EfrInstance,
    table: &EmbeddingTable,
    vocab: &SpeakerVocab,
    label_set: &[String],
    scope: HistoryScope,
) -> Result<EfrInput> {
    let width = table.dim + vocab.k + label_set.len();
    let mut features = Array2::zeros((instance.len(), width));
    for (j, u) in instance.window.iter().enumerate() {
        let key = instance.key(j);
        let emb = table
            .get(&key)
            .ok_or_else(|| Error::MissingEmbeddings(vec![key.clone()]))?;
        let mut row = features.row_mut(j);
        for (c, &x) in emb.iter().enumerate() {
            row[c] = f64::from(x);
        }
        for (c, x) in speaker_one_hot(&u.speaker, vocab).into_iter().enumerate() {
            row[table.dim + c] = x;
        }
        let emo = emotion_row(u.emotion.as_deref(), instance, u.index, label_set)?;
        for (c, x) in emo.into_iter().enumerate() {
            row[table.dim + vocab.k + c] = x;
        }
    }

    let history_labels: Vec<(usize, Option<&str>)> = match scope {
        HistoryScope::Window => instance.window.iter().map(|u| (u.index, u.emotion.as_deref())).collect(),
        HistoryScope::Episode => instance.episode_emotions[..=instance.target_episode_index()]
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.as_deref()))
            .collect(),
    };
    let mut history = Array2::zeros((history_labels.len(), label_set.len()));
    for (r, (pos, label)) in history_labels.into_iter().enumerate() {
        let emo = emotion_row(label, instance, pos, label_set)?;
        history.row_mut(r).assign(&ndarray::Array1::from(emo));
    }

    Ok(EfrInput {
        features,
        history,
        zone: instance_zone(instance),
        window_offset: instance.window_offset,
    })
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: MultiHeadSelfAttention,
    norm_attention: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm_ff: LayerNorm,
}

/// Handles to the intermediate values of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EfrForward {
    pub contextual: Var,
    pub target: Var,
    pub history: Var,
    pub classifier_input: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPrediction {
    /// `[P(non-trigger), P(trigger)]` per window position.
    pub probabilities: Vec<[f64; 2]>,
    pub decisions: Vec<u8>,
    /// Positions whose positive decision was zeroed by the zone mask.
    pub masked: Vec<bool>,
}

impl TriggerPrediction {
    pub fn positives(&self) -> usize {
        self.decisions.iter().filter(|&&d| d == 1).count()
    }

    pub fn mask_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct EfrModel {
    pub config: EfrConfig,
    pub store: ParamStore,
    projection: Linear,
    layers: Vec<EncoderLayer>,
    history_gru: Gru,
    classifier: Linear,
}

impl EfrModel {
    pub fn new(config: EfrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = config.model_dim;
        let projection = Linear::new(&mut store, "efr.projection", config.input_dim(), m, &mut rng);
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("efr.encoder.{l}");
                EncoderLayer {
                    attention: MultiHeadSelfAttention::new(&mut store, &format!("{name}.attention"), m, config.heads, &mut rng),
                    norm_attention: LayerNorm::new(&mut store, &format!("{name}.norm_attention"), m),
                    ff_in: Linear::new(&mut store, &format!("{name}.ff_in"), m, config.ff_dim, &mut rng),
                    ff_out: Linear::new(&mut store, &format!("{name}.ff_out"), config.ff_dim, m, &mut rng),
                    norm_ff: LayerNorm::new(&mut store, &format!("{name}.norm_ff"), m),
                }
            })
            .collect();
        let history_gru = Gru::new(&mut store, "efr.history_gru", config.num_emotions, config.history_dim, &mut rng);
        let classifier = Linear::new(&mut store, "efr.classifier", 2 * m + config.history_dim, 2, &mut rng);
        Ok(EfrModel {
            config,
            store,
            projection,
            layers,
            history_gru,
            classifier,
        })
    }

    pub fn with_params(config: EfrConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.store.names() != params.names()
            || model
                .store
                .values()
                .iter()
                .zip(params.values())
                .any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Checkpoint("parameter layout does not match the model config".into()));
        }
        model.store.copy_from(params);
        Ok(model)
    }

    /// Learned projection, positional encodings and the encoder stack.
    pub fn contextualize(&self, tape: &mut Tape, features: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        let (len, _) = tape.shape(features);
        let x = self.projection.forward(tape, features);
        let pe = tape.constant(sinusoidal_positions(len, self.config.model_dim));
        let x = tape.add(x, pe);
        let mut x = dropout(tape, x, p, rng.as_deref_mut());
        for layer in &self.layers {
            let a = layer.attention.forward(tape, x);
            let a = dropout(tape, a, p, rng.as_deref_mut());
            let res = tape.add(x, a);
            x = layer.norm_attention.forward(tape, res);
            let f = layer.ff_in.forward(tape, x);
            let f = tape.relu(f);
            let f = layer.ff_out.forward(tape, f);
            let f = dropout(tape, f, p, rng.as_deref_mut());
            let res = tape.add(x, f);
            x = layer.norm_ff.forward(tape, res);
        }
        x
    }

    pub fn emotion_history(&self, tape: &mut Tape, emotions: Var) -> Var {
        self.history_gru.last_state(tape, emotions)
    }

    pub fn forward(&self, tape: &mut Tape, input: &EfrInput, rng: Option<&mut ChaCha8Rng>) -> Result<EfrForward> {
        let (len, width) = input.features.dim();
        if width != self.config.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim(),
                found: width,
            });
        }
        if len == 0 {
            return Err(Error::Invalid("empty window".into()));
        }
        if input.history.ncols() != self.config.num_emotions {
            return Err(Error::DimMismatch {
                expected: self.config.num_emotions,
                found: input.history.ncols(),
            });
        }
        let features = tape.constant(input.features.clone());
        let contextual = self.contextualize(tape, features, rng);
        let emotions = tape.constant(input.history.clone());
        let history = self.emotion_history(tape, emotions);

        let target = tape.row_of(contextual, len - 1);
        let ones = tape.constant(Array2::ones((len, 1)));
        let target_rows = tape.matmul(ones, target);
        let history_rows = tape.matmul(ones, history);
        let classifier_input = tape.concat_cols(&[contextual, target_rows, history_rows]);
        let logits = self.classifier.forward(tape, classifier_input);
        Ok(EfrForward {
            contextual,
            target,
            history,
            classifier_input,
            logits,
        })
    }

    pub fn predict(&self, input: &EfrInput, ptz_mask: bool) -> Result<TriggerPrediction> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, input, None)?;
        let probs = tape.softmax_rows(out.logits);
        Ok(decide(tape.value(probs), input, ptz_mask))
    }
}

/// Argmax decisions from per-position probabilities, optionally masked to
/// the zone.
pub fn decide(probs: &Array2<f64>, input: &EfrInput, ptz_mask: bool) -> TriggerPrediction {
    let probabilities: Vec<[f64; 2]> = probs.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let raw: Vec<u8> = probabilities.iter().map(|p| u8::from(p[1] > p[0])).collect();
    let decisions = if ptz_mask {
        apply_ptz_mask(&raw, input.zone, input.window_offset)
    } else {
        raw.clone()
    };
    let masked = raw.iter().zip(&decisions).map(|(&a, &b)| a == 1 && b == 0).collect();
    TriggerPrediction {
        probabilities,
        decisions,
        masked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_efr_instances, Corpus, Dialogue, TaskId, Utterance};
    use rand::Rng;

    fn tiny() -> EfrModel {
        let mut cfg = EfrConfig::new(4, 2, 3);
        cfg.model_dim = 8;
        cfg.heads = 2;
        cfg.ff_dim = 12;
        cfg.history_dim = 3;
        cfg.dropout = 0.0;
        EfrModel::new(cfg, 5).unwrap()
    }

    fn random_input(len: usize, seed: u64) -> EfrInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EfrInput {
            features: Array2::from_shape_simple_fn((len, 9), || rng.random_range(-1.0..1.0)),
            history: Array2::from_shape_fn((len, 3), |(r, c)| f64::from(u8::from((r + c) % 3 == 0))),
            zone: PtzRange { start: 0, end: len - 1 },
            window_offset: 0,
        }
    }

    #[test]
    fn input_widths() {
        assert_eq!(EfrConfig::new(1024, 6, 7).input_dim(), 1037);
        assert_eq!(EfrConfig::new(768, 6, 8).input_dim(), 782);
        let mut bad = EfrConfig::new(8, 1, 2);
        bad.model_dim = 10;
        bad.heads = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shapes() {
        let m = tiny();
        for len in 1..=5 {
            let mut tape = Tape::new(&m.store);
            let f = m.forward(&mut tape, &random_input(len, 1), None).unwrap();
            assert_eq!(tape.shape(f.contextual), (len, 8));
            assert_eq!(tape.shape(f.history), (1, 3));
            assert_eq!(tape.shape(f.logits), (len, 2));
        }
    }

    #[test]
    fn zero_parameters_give_even_odds() {
        let mut m = tiny();
        m.store.zero_all();
        let pred = m.predict(&random_input(3, 2), false).unwrap();
        for p in pred.probabilities {
            assert_eq!(p, [0.5, 0.5]);
        }
        assert_eq!(pred.decisions, vec![0, 0, 0]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let pred = tiny().predict(&random_input(5, 3), false).unwrap();
        for p in &pred.probabilities {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn target_vector_is_last_contextual_row() {
        let m = tiny();
        let mut tape = Tape::new(&m.store);
        let f = m.forward(&mut tape, &random_input(4, 4), None).unwrap();
        let ctx = tape.value(f.contextual).clone();
        let input = tape.value(f.classifier_input).clone();
        for r in 0..4 {
            for c in 0..8 {
                assert_eq!(input[[r, 8 + c]], ctx[[3, c]]);
                assert_eq!(input[[r, c]], ctx[[r, c]]);
            }
        }
    }

    fn utt(i: usize, speaker: &str, emotion: &str) -> Utterance {
        Utterance {
            index: i,
            speaker: speaker.into(),
            text: format!("t{i}"),
            emotion: Some(emotion.into()),
        }
    }

    #[test]
    fn zone_restriction_cuts_the_window() {
        let d = Dialogue {
            id: "d".into(),
            offset: 0,
            utterances: vec![
                utt(0, "A", "joy"),
                utt(1, "B", "joy"),
                utt(2, "A", "joy"),
                utt(3, "B", "joy"),
                utt(4, "C", "joy"),
                utt(5, "A", "anger"),
            ],
            triggers: Some(vec![0, 1, 0, 1, 1, 0]),
        };
        let c = Corpus::new(vec![d], TaskId::FLIP_ENGLISH);
        let inst = &make_efr_instances(&c, 5).unwrap()[0];
        assert_eq!(instance_zone(inst), PtzRange { start: 2, end: 5 });
        let r = restrict_to_zone(inst);
        assert_eq!(r.window_offset, 2);
        assert_eq!(r.trigger_labels, vec![0, 1, 1, 0]);
        assert_eq!(r.target_index, 3);
        assert_eq!(r.target_episode_index(), 5);
    }
}
