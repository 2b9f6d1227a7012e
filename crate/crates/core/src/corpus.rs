//! Dialogue datasets: ingestion, training views and dataset statistics.
//!
//! Input files are JSON arrays of episode objects with parallel arrays:
//!
//! ```json
//! [{"episode": "utterance_0",
//!   "speakers": ["Ross", "Rachel"],
//!   "utterances": ["Hi.", "Oh my God!"],
//!   "emotions": ["neutral", "surprise"],
//!   "triggers": [1.0, 0.0]}]
//! ```
//!
//! `triggers` is optional and may contain `null`, which reads as `0`.
//! Flip-reasoning files repeat a conversation once per emotion flip, each
//! entry ending at its target utterance.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three sub-tasks: 1 is emotion recognition, 2 and 3 are
/// flip reasoning (code-mixed and English).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TaskId(u8);

impl TaskId {
    pub const RECOGNITION: TaskId = TaskId(1);
    pub const FLIP_CODE_MIXED: TaskId = TaskId(2);
    pub const FLIP_ENGLISH: TaskId = TaskId(3);

    pub fn new(id: u8) -> Result<Self> {
        match id {
            1..=3 => Ok(TaskId(id)),
            other => Err(Error::Invalid(format!("task must be 1, 2 or 3, got {other}"))),
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn is_flip_reasoning(self) -> bool {
        self.0 != 1
    }

    /// Embedding width of the encoder used for this task.
    pub fn embedding_dim(self) -> usize {
        if self.0 == 3 {
            1024
        } else {
            768
        }
    }
}

impl TryFrom<u8> for TaskId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        TaskId::new(v)
    }
}

impl From<TaskId> for u8 {
    fn from(t: TaskId) -> u8 {
        t.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    /// Position within the owning dialogue (0-based).
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub emotion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    /// Position of the first utterance within the source episode. Non-zero
    /// only for chunks produced by [`split_sequences`].
    pub offset: usize,
    pub utterances: Vec<Utterance>,
    pub triggers: Option<Vec<u8>>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Embedding-cache key of the utterance at `index` within this dialogue.
    pub fn key(&self, index: usize) -> String {
        utterance_key(&self.id, self.offset + index)
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.speaker.as_str())
    }
}

/// Stable key of an utterance: episode id and position in the source episode.
pub fn utterance_key(dialogue_id: &str, index: usize) -> String {
    format!("{dialogue_id}#{index}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    /// Observed emotion labels, sorted lexicographically.
    pub label_set: Vec<String>,
    pub task: TaskId,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>, task: TaskId) -> Self {
        let label_set = label_set_of(&dialogues);
        Corpus {
            dialogues,
            label_set,
            task,
        }
    }

    pub fn num_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            dialogues: indices.iter().map(|&i| self.dialogues[i].clone()).collect(),
            label_set: self.label_set.clone(),
            task: self.task,
        }
    }
}

fn label_set_of(dialogues: &[Dialogue]) -> Vec<String> {
    let mut labels: Vec<String> = dialogues
        .iter()
        .flat_map(|d| d.utterances.iter())
        .filter_map(|u| u.emotion.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    labels.sort();
    labels
}

#[derive(Debug, Serialize, Deserialize)]
struct RawEpisode {
    episode: String,
    speakers: Vec<String>,
    utterances: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotions: Option<Vec<Option<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triggers: Option<Vec<Option<f64>>>,
}

pub fn load_corpus(path: impl AsRef<Path>, task: TaskId) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, task)
}

pub fn parse_corpus(text: &str, task: TaskId) -> Result<Corpus> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Parse {
        episode: None,
        message: e.to_string(),
    })?;
    let mut dialogues = Vec::with_capacity(values.len());
    for (i, value) in values.into_iter().enumerate() {
        let raw: RawEpisode = serde_json::from_value(value).map_err(|e| Error::Parse {
            episode: Some(i),
            message: e.to_string(),
        })?;
        dialogues.push(validate_episode(raw, i)?);
    }
    // Embedding keys are built from episode ids, so repeated ids get a
    // positional suffix.
    let mut seen = HashSet::new();
    for (i, d) in dialogues.iter_mut().enumerate() {
        if !seen.insert(d.id.clone()) {
            d.id = format!("{}@{i}", d.id);
        }
    }
    Ok(Corpus::new(dialogues, task))
}

fn validate_episode(raw: RawEpisode, position: usize) -> Result<Dialogue> {
    let name = format!("{:?} (#{position})", raw.episode);
    let fail = |message: String| Error::Validation {
        episode: name.clone(),
        message,
    };
    let n = raw.utterances.len();
    if n == 0 {
        return Err(fail("episode has no utterances".into()));
    }
    if raw.speakers.len() != n {
        return Err(fail(format!("{} speakers for {n} utterances", raw.speakers.len())));
    }
    if let Some(e) = &raw.emotions {
        if e.len() != n {
            return Err(fail(format!("{} emotions for {n} utterances", e.len())));
        }
    }
    let triggers = match raw.triggers {
        None => None,
        Some(t) if t.len() != n => {
            return Err(fail(format!("{} triggers for {n} utterances", t.len())))
        }
        Some(t) => Some(
            t.into_iter()
                .enumerate()
                .map(|(j, v)| match v {
                    None => Ok(0u8),
                    Some(0.0) => Ok(0),
                    Some(1.0) => Ok(1),
                    Some(x) => Err(fail(format!("trigger {j} is {x}, expected 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let mut emotions = raw.emotions.map(Vec::into_iter);
    let mut utterances = Vec::with_capacity(n);
    for (index, (speaker, text)) in raw.speakers.into_iter().zip(raw.utterances).enumerate() {
        if text.trim().is_empty() {
            return Err(fail(format!("utterance {index} is empty")));
        }
        let emotion = emotions.as_mut().and_then(|e| e.next().flatten());
        utterances.push(Utterance {
            index,
            speaker,
            text,
            emotion,
        });
    }
    Ok(Dialogue {
        id: raw.episode,
        offset: 0,
        utterances,
        triggers,
    })
}

/// Serializes back to the input format. Chunk offsets are not represented.
pub fn corpus_to_json(corpus: &Corpus) -> Result<String> {
    let raw: Vec<RawEpisode> = corpus
        .dialogues
        .iter()
        .map(|d| {
            let has_emotions = d.utterances.iter().any(|u| u.emotion.is_some());
            RawEpisode {
                episode: d.id.clone(),
                speakers: d.utterances.iter().map(|u| u.speaker.clone()).collect(),
                utterances: d.utterances.iter().map(|u| u.text.clone()).collect(),
                emotions: has_emotions
                    .then(|| d.utterances.iter().map(|u| u.emotion.clone()).collect()),
                triggers: d
                    .triggers
                    .as_ref()
                    .map(|t| t.iter().map(|&x| Some(f64::from(x))).collect()),
            }
        })
        .collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, corpus_to_json(corpus)?)?;
    Ok(())
}

/// Breaks a dialogue into disjoint consecutive chunks of at most `seq_len`
/// utterances. Chunk utterance indices restart at 0; `offset` records where
/// each chunk starts in the source.
pub fn split_sequences(dialogue: &Dialogue, seq_len: usize) -> Vec<Dialogue> {
    assert!(seq_len >= 1, "seq_len must be positive");
    dialogue
        .utterances
        .chunks(seq_len)
        .enumerate()
        .map(|(c, chunk)| {
            let start = c * seq_len;
            Dialogue {
                id: dialogue.id.clone(),
                offset: dialogue.offset + start,
                utterances: chunk
                    .iter()
                    .enumerate()
                    .map(|(i, u)| Utterance {
                        index: i,
                        ..u.clone()
                    })
                    .collect(),
                triggers: dialogue
                    .triggers
                    .as_ref()
                    .map(|t| t[start..start + chunk.len()].to_vec()),
            }
        })
        .collect()
}

/// A flip-reasoning example: the last `w` utterances of an episode, whose
/// final utterance is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct EfrInstance {
    pub dialogue_index: usize,
    pub dialogue_id: String,
    /// Episode position of the first window utterance.
    pub window_offset: usize,
    /// Window utterances; `index` keeps the episode position.
    pub window: Vec<Utterance>,
    pub target_index: usize,
    pub trigger_labels: Vec<u8>,
    /// Emotions of every utterance of the episode up to the target.
    pub episode_emotions: Vec<Option<String>>,
    /// Speakers of every utterance of the episode up to the target.
    pub episode_speakers: Vec<String>,
}

impl EfrInstance {
    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn key(&self, position: usize) -> String {
        utterance_key(&self.dialogue_id, self.window[position].index)
    }

    /// Episode-level index of the target utterance.
    pub fn target_episode_index(&self) -> usize {
        self.window_offset + self.target_index
    }
}

pub fn make_efr_instances(corpus: &Corpus, w: usize) -> Result<Vec<EfrInstance>> {
    assert!(w >= 1, "window must be positive");
    corpus
        .dialogues
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.is_empty())
        .map(|(i, d)| {
            let triggers = d.triggers.as_ref().ok_or_else(|| Error::Validation {
                episode: d.id.clone(),
                message: "no trigger labels".into(),
            })?;
            let n = d.len();
            let start = n.saturating_sub(w);
            Ok(EfrInstance {
                dialogue_index: i,
                dialogue_id: d.id.clone(),
                window_offset: d.offset + start,
                window: d.utterances[start..]
                    .iter()
                    .map(|u| Utterance {
                        index: d.offset + u.index,
                        ..u.clone()
                    })
                    .collect(),
                target_index: n - start - 1,
                trigger_labels: triggers[start..].to_vec(),
                episode_emotions: d.utterances.iter().map(|u| u.emotion.clone()).collect(),
                episode_speakers: d.utterances.iter().map(|u| u.speaker.clone()).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Inverse,
    InverseSqrt,
}

/// Class weights proportional to `1/support` or `1/sqrt(support)`, scaled to
/// sum to the number of classes.
pub fn class_weights_from_supports(supports: &[u64], labels: &[String], mode: WeightMode) -> Result<Vec<f64>> {
    if let Some(i) = supports.iter().position(|&s| s == 0) {
        let label = labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        return Err(Error::ZeroSupport(label));
    }
    let raw: Vec<f64> = supports
        .iter()
        .map(|&s| match mode {
            WeightMode::Inverse => 1.0 / s as f64,
            WeightMode::InverseSqrt => 1.0 / (s as f64).sqrt(),
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let k = raw.len() as f64;
    Ok(raw.into_iter().map(|x| x * k / total).collect())
}

/// Emotion supports aligned to `corpus.label_set`.
pub fn emotion_supports(corpus: &Corpus) -> Result<Vec<u64>> {
    let mut supports = vec![0u64; corpus.label_set.len()];
    for d in &corpus.dialogues {
        for u in &d.utterances {
            let label = u.emotion.as_deref().ok_or_else(|| Error::Validation {
                episode: d.id.clone(),
                message: format!("utterance {} has no emotion label", u.index),
            })?;
            let i = corpus
                .label_index(label)
                .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
            supports[i] += 1;
        }
    }
    Ok(supports)
}

/// Emotion class weights over `corpus.label_set`.
pub fn class_weights(corpus: &Corpus, mode: WeightMode) -> Result<Vec<f64>> {
    class_weights_from_supports(&emotion_supports(corpus)?, &corpus.label_set, mode)
}

/// Weights over the binary trigger labels `{0, 1}` of windowed instances.
pub fn trigger_class_weights(instances: &[EfrInstance], mode: WeightMode) -> Result<Vec<f64>> {
    let mut supports = [0u64; 2];
    for inst in instances {
        for &t in &inst.trigger_labels {
            supports[usize::from(t)] += 1;
        }
    }
    class_weights_from_supports(&supports, &["0".into(), "1".into()], mode)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    /// Distinct conversations.
    pub episodes: u64,
    /// Utterances of the distinct conversations.
    pub utterances: u64,
    /// Entries in the file (one per flip target for flip-reasoning data).
    pub instances: u64,
    /// Positive trigger labels over all entries.
    pub triggers: u64,
    /// Emotion histogram over the distinct conversations.
    pub label_histogram: BTreeMap<String, u64>,
}

fn content_hashes(d: &Dialogue) -> Vec<u64> {
    let mut h = DefaultHasher::new();
    d.utterances
        .iter()
        .map(|u| {
            u.speaker.hash(&mut h);
            u.text.hash(&mut h);
            h.clone().finish()
        })
        .collect()
}

/// Maps each entry to the index of a representative entry of its
/// conversation. Entries whose `(speaker, text)` sequence is a prefix of (or
/// equal to) a longer entry share that entry's group.
pub fn conversation_groups(corpus: &Corpus) -> Vec<usize> {
    let all: Vec<Vec<u64>> = corpus.dialogues.iter().map(content_hashes).collect();
    let proper_prefixes: HashSet<u64> = all
        .iter()
        .flat_map(|hs| hs.iter().take(hs.len().saturating_sub(1)).copied())
        .collect();
    let mut owner: HashMap<u64, usize> = HashMap::new();
    for (i, hs) in all.iter().enumerate() {
        if hs.last().is_some_and(|last| !proper_prefixes.contains(last)) {
            for &h in hs {
                owner.entry(h).or_insert(i);
            }
        }
    }
    all.iter()
        .enumerate()
        .map(|(i, hs)| hs.last().and_then(|h| owner.get(h)).copied().unwrap_or(i))
        .collect()
}

/// Counts distinct conversations, their utterances, and trigger labels.
///
/// Flip-reasoning files repeat a conversation as growing prefixes. An entry
/// that is a prefix of (or equal to) another entry's `(speaker, text)`
/// sequence is folded into it, so each conversation counts once.
pub fn dataset_stats(corpus: &Corpus) -> Stats {
    let groups = conversation_groups(corpus);
    let mut stats = Stats {
        instances: corpus.dialogues.len() as u64,
        ..Stats::default()
    };
    for (i, d) in corpus.dialogues.iter().enumerate() {
        stats.triggers += d
            .triggers
            .as_ref()
            .map_or(0, |t| t.iter().map(|&x| u64::from(x)).sum());
        if groups[i] != i {
            continue;
        }
        stats.episodes += 1;
        stats.utterances += d.len() as u64;
        for u in &d.utterances {
            if let Some(e) = &u.emotion {
                *stats.label_histogram.entry(e.clone()).or_default() += 1;
            }
        }
    }
    stats
}

/// Histogram of `target - trigger` distances, the target being each entry's
/// final utterance.
pub fn trigger_distance_histogram(corpus: &Corpus) -> BTreeMap<usize, u64> {
    let mut hist = BTreeMap::new();
    for d in &corpus.dialogues {
        let Some(triggers) = &d.triggers else { continue };
        let Some(target) = triggers.len().checked_sub(1) else { continue };
        for (i, &t) in triggers.iter().enumerate() {
            if t == 1 {
                *hist.entry(target - i).or_default() += 1;
            }
        }
    }
    hist
}
