//! Masked memory network for per-utterance emotion recognition.
//!
//! For each utterance `t` of a dialogue:
//!
//! ```text
//! do_t  = dGRU(u_t ++ s_t)                       dialogue level
//! o_t   = gGRU(do_t ++ so_{t-1})                 global level
//! c_t   = attention(q = do_t, k = o_{<t}, v = o_{<t})
//! so_t  = sGRU(c_t + do_t, state[speaker_t])     speaker level, writes state back
//! m^0   = mGRU(o_{1..t})
//! r_i   = attention(q = so_t, k = v = m^{i-1})   i = 1..hops
//! m^i   = mGRU(m^{i-1} + r_i)
//! co_t  = cGRU(r_hops ++ so_t)                   conversation level
//! e_t   = W co_t + b
//! ```
//!
//! `++` is concatenation. Memory positions after `t` never enter step `t`.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::embed::{speaker_one_hot, EmbeddingTable, SpeakerVocab};
use crate::error::{Error, Result};
use crate::nn::{attend, dropout, Gru, Linear, ParamStore, Tape, Var};

/// Values used by the attention over past global outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionValues {
    /// Values are the past global outputs `o_{<t}`.
    PastOutputs,
    /// Values are the query `do_t` itself.
    Query,
}

/// Which speaker-level output feeds the global unit at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerFeedback {
    /// `so_{t-1}` of whichever speaker spoke at `t - 1`.
    PreviousStep,
    /// The current speaker's last stored state.
    SameSpeaker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErcConfig {
    pub embedding_dim: usize,
    /// Width of the speaker one-hot.
    pub speakers: usize,
    pub hidden_dim: usize,
    pub hops: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub seq_len: usize,
    pub attention_values: AttentionValues,
    pub speaker_feedback: SpeakerFeedback,
}

impl ErcConfig {
    pub fn new(embedding_dim: usize, speakers: usize, num_classes: usize) -> Self {
        ErcConfig {
            embedding_dim,
            speakers,
            hidden_dim: 300,
            hops: 3,
            num_classes,
            dropout: 0.1,
            seq_len: 15,
            attention_values: AttentionValues::PastOutputs,
            speaker_feedback: SpeakerFeedback::PreviousStep,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embedding_dim + self.speakers
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.hidden_dim == 0 || self.num_classes == 0 || self.seq_len == 0 {
            return Err(Error::Invalid("recognition model dimensions must be positive".into()));
        }
        if self.hops == 0 {
            return Err(Error::Invalid("at least one memory hop is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-dialogue model input: one row of `embedding ++ speaker one-hot` per
/// utterance, plus speaker names for the speaker-state dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct ErcInput {
    pub features: Array2<f64>,
    pub speakers: Vec<String>,
}

impl ErcInput {
    pub fn from_dialogue(d: &Dialogue, table: &EmbeddingTable, vocab: &SpeakerVocab) -> Result<Self> {
        let width = table.dim + vocab.k;
        let mut features = Array2::zeros((d.len(), width));
        for (i, u) in d.utterances.iter().enumerate() {
            let key = d.key(i);
            let emb = table
                .get(&key)
                .ok_or_else(|| Error::MissingEmbeddings(vec![key.clone()]))?;
            let mut row = features.row_mut(i);
            for (j, &x) in emb.iter().enumerate() {
                row[j] = f64::from(x);
            }
            for (j, x) in speaker_one_hot(&u.speaker, vocab).into_iter().enumerate() {
                row[table.dim + j] = x;
            }
        }
        Ok(ErcInput {
            features,
            speakers: d.utterances.iter().map(|u| u.speaker.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Speaker-state read at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerRead {
    pub speaker: String,
    /// Step that last wrote this speaker's state, `None` for a fresh zero state.
    pub written_at: Option<usize>,
    pub state: Vec<f64>,
}

/// Intermediate quantities recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ErcTrace {
    pub past_attention: Vec<Option<Vec<f64>>>,
    pub memory_attention: Vec<Vec<Vec<f64>>>,
    pub speaker_reads: Vec<SpeakerRead>,
    pub past_attention_calls: Vec<usize>,
    pub memory_calls: Vec<usize>,
    pub global_outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ErcModel {
    pub config: ErcConfig,
    pub store: ParamStore,
    dialogue_gru: Gru,
    global_gru: Gru,
    speaker_gru: Gru,
    memory_gru: Gru,
    conversation_gru: Gru,
    classifier: Linear,
}

impl ErcModel {
    pub fn new(config: ErcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        let dialogue_gru = Gru::new(&mut store, "erc.dialogue_gru", config.input_dim(), h, &mut rng);
        let global_gru = Gru::new(&mut store, "erc.global_gru", 2 * h, h, &mut rng);
        let speaker_gru = Gru::new(&mut store, "erc.speaker_gru", h, h, &mut rng);
        let memory_gru = Gru::new(&mut store, "erc.memory_gru", h, h, &mut rng);
        let conversation_gru = Gru::new(&mut store, "erc.conversation_gru", 2 * h, h, &mut rng);
        let classifier = Linear::new(&mut store, "erc.classifier", h, config.num_classes, &mut rng);
        Ok(ErcModel {
            config,
            store,
            dialogue_gru,
            global_gru,
            speaker_gru,
            memory_gru,
            conversation_gru,
            classifier,
        })
    }

    /// Rebuilds a model around saved parameters.
    pub fn with_params(config: ErcConfig, params: &ParamStore) -> Result<Self> {
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

    /// Builds the forward pass on `tape` and returns `n x num_classes` logits.
    ///
    /// Dropout is active only when `rng` is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ErcInput,
        mut rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut ErcTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (n, width) = input.features.dim();
        if width != cfg.input_dim() {
            return Err(Error::DimMismatch {
                expected: cfg.input_dim(),
                found: width,
            });
        }
        if n == 0 {
            return Err(Error::Invalid("empty dialogue".into()));
        }
        let h = cfg.hidden_dim;
        let p = cfg.dropout;

        let x = tape.constant(input.features.clone());
        let dialogue_out = self.dialogue_gru.run(tape, x);
        let dialogue_out = dropout(tape, dialogue_out, p, rng.as_deref_mut());

        let zero = tape.zeros(1, h);
        let mut global_outs: Vec<Var> = Vec::with_capacity(n);
        let mut memory0: Vec<Var> = Vec::with_capacity(n);
        let mut speaker_states: HashMap<&str, (Var, usize)> = HashMap::new();
        let mut speaker_prev = zero;
        let mut conversation_state = zero;
        let mut conversation_outs = Vec::with_capacity(n);

        for t in 0..n {
            let speaker = input.speakers[t].as_str();
            let do_t = tape.row_of(dialogue_out, t);

            // global level
            let feedback = match cfg.speaker_feedback {
                SpeakerFeedback::PreviousStep => speaker_prev,
                SpeakerFeedback::SameSpeaker => speaker_states.get(speaker).map_or(zero, |s| s.0),
            };
            let g_in = tape.concat_cols(&[do_t, feedback]);
            let o_prev = global_outs.last().copied().unwrap_or(zero);
            let o_t = self.global_gru.step(tape, g_in, o_prev);

            // attention over past global outputs
            let context = if t == 0 {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.past_attention.push(None);
                }
                zero
            } else {
                let past = tape.concat_rows(&global_outs);
                let values = match cfg.attention_values {
                    AttentionValues::PastOutputs => past,
                    AttentionValues::Query => {
                        let ones = tape.constant(Array2::ones((t, 1)));
                        tape.matmul(ones, do_t)
                    }
                };
                let (read, weights) = attend(tape, do_t, past, values);
                if let Some(tr) = trace.as_deref_mut() {
                    tr.past_attention.push(Some(tape.value(weights).iter().copied().collect()));
                }
                read
            };
            global_outs.push(o_t);

            // speaker level
            let s_in = tape.add(context, do_t);
            let (s_prev, written_at) = match speaker_states.get(speaker) {
                Some(&(state, step)) => (state, Some(step)),
                None => (zero, None),
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.speaker_reads.push(SpeakerRead {
                    speaker: speaker.to_string(),
                    written_at,
                    state: tape.value(s_prev).iter().copied().collect(),
                });
            }
            let so_t = self.speaker_gru.step(tape, s_in, s_prev);
            speaker_states.insert(speaker, (so_t, t));
            speaker_prev = so_t;

            // masked memory over o_{1..t}
            let m_prev = memory0.last().copied().unwrap_or(zero);
            memory0.push(self.memory_gru.step(tape, o_t, m_prev));
            let (mem_read, hop_weights) = self.masked_memory(tape, &memory0, so_t);
            if let Some(tr) = trace.as_deref_mut() {
                tr.memory_attention.push(hop_weights);
                tr.past_attention_calls.push(usize::from(t > 0));
                tr.memory_calls.push(1);
                tr.global_outputs.push(tape.value(o_t).iter().copied().collect());
            }

            // conversation level
            let c_in = tape.concat_cols(&[mem_read, so_t]);
            conversation_state = self.conversation_gru.step(tape, c_in, conversation_state);
            conversation_outs.push(conversation_state);
        }

        let co = tape.concat_rows(&conversation_outs);
        let co = dropout(tape, co, p, rng);
        Ok(self.classifier.forward(tape, co))
    }

    /// Multi-hop read over the memory rows currently visible. Returns the
    /// final read and the attention weights of every hop.
    fn masked_memory(&self, tape: &mut Tape, memory0: &[Var], query: Var) -> (Var, Vec<Vec<f64>>) {
        let mut memory = tape.concat_rows(memory0);
        let mut weights_per_hop = Vec::with_capacity(self.config.hops);
        let mut read = query;
        for hop in 1..=self.config.hops {
            let (r, w) = attend(tape, query, memory, memory);
            weights_per_hop.push(tape.value(w).iter().copied().collect());
            read = r;
            if hop < self.config.hops {
                let updated = tape.add_row(memory, r);
                memory = self.memory_gru.run(tape, updated);
            }
        }
        (read, weights_per_hop)
    }

    /// Inference logits (no dropout).
    pub fn logits(&self, input: &ErcInput) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, input, None, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn trace(&self, input: &ErcInput) -> Result<(Array2<f64>, ErcTrace)> {
        let mut tape = Tape::new(&self.store);
        let mut trace = ErcTrace::default();
        let out = self.forward(&mut tape, input, None, Some(&mut trace))?;
        Ok((tape.value(out).clone(), trace))
    }

    pub fn predict(&self, input: &ErcInput) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(input)?))
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Gold label indices of a dialogue over `label_set`.
pub fn gold_labels(d: &Dialogue, label_set: &[String]) -> Result<Vec<usize>> {
    d.utterances
        .iter()
        .map(|u| {
            let label = u.emotion.as_deref().ok_or_else(|| Error::Validation {
                episode: d.id.clone(),
                message: format!("utterance {} has no emotion label", u.index),
            })?;
            label_set
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::UnknownLabel(label.to_string()))
        })
        .collect()
}
