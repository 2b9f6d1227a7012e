//! Seeded synthetic corpora in the input file format, for tests and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Dialogue, TaskId, Utterance};

const WORDS: &[&str] = &[
    "okay", "really", "no", "wait", "yeah", "what", "listen", "please", "fine", "great", "sorry", "why", "stop",
    "look", "sure", "maybe", "never", "again", "today", "home",
];

pub const EMOTIONS: &[&str] = &["anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub conversations: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub speakers: usize,
    /// Chance that an utterance keeps its speaker's previous emotion.
    pub persistence: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            conversations: 20,
            min_len: 4,
            max_len: 10,
            speakers: 4,
            persistence: 0.6,
            seed: 7,
        }
    }
}

fn conversation(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, id: usize) -> Vec<Utterance> {
    let len = rng.random_range(spec.min_len..=spec.max_len.max(spec.min_len));
    let cast: Vec<String> = (0..spec.speakers.max(1)).map(|s| format!("Speaker{s}")).collect();
    let mut last_emotion: Vec<Option<&str>> = vec![None; cast.len()];
    (0..len)
        .map(|i| {
            let s = rng.random_range(0..cast.len());
            let emotion = match last_emotion[s] {
                Some(e) if rng.random_bool(spec.persistence) => e,
                _ => *EMOTIONS.choose(rng).expect("non-empty"),
            };
            last_emotion[s] = Some(emotion);
            let words: Vec<&str> = (0..rng.random_range(2..6)).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
            Utterance {
                index: i,
                speaker: cast[s].clone(),
                text: format!("{} {emotion} c{id}u{i}", words.join(" ")),
                emotion: Some(emotion.to_string()),
            }
        })
        .collect()
}

/// One episode per conversation, emotions only.
pub fn recognition_corpus(spec: &SyntheticSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dialogues = (0..spec.conversations)
        .map(|c| Dialogue {
            id: format!("episode_{c}"),
            offset: 0,
            utterances: conversation(&mut rng, spec, c),
            triggers: None,
        })
        .collect();
    Corpus::new(dialogues, TaskId::RECOGNITION)
}

/// One entry per emotion flip, each a prefix of its conversation ending at
/// the flip. Triggers are the utterance before the target plus, sometimes,
/// the target itself or an earlier utterance of another speaker.
pub fn flip_corpus(spec: &SyntheticSpec, task: TaskId) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dialogues = Vec::new();
    for c in 0..spec.conversations {
        let utterances = conversation(&mut rng, spec, c);
        for t in 1..utterances.len() {
            let who = &utterances[t].speaker;
            let Some(prev) = utterances[..t].iter().rposition(|u| &u.speaker == who) else {
                continue;
            };
            if utterances[prev].emotion == utterances[t].emotion {
                continue;
            }
            let mut triggers = vec![0u8; t + 1];
            triggers[t - 1] = 1;
            if rng.random_bool(0.2) {
                triggers[t] = 1;
            }
            if t >= 3 && rng.random_bool(0.1) {
                triggers[rng.random_range(0..t - 1)] = 1;
            }
            dialogues.push(Dialogue {
                id: format!("utterance_{}", dialogues.len()),
                offset: 0,
                utterances: utterances[..=t].to_vec(),
                triggers: Some(triggers),
            });
        }
    }
    Corpus::new(dialogues, task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_json, dataset_stats, parse_corpus};

    #[test]
    fn seeded_and_parseable() {
        let spec = SyntheticSpec::default();
        assert_eq!(recognition_corpus(&spec), recognition_corpus(&spec));
        let flips = flip_corpus(&spec, TaskId::FLIP_ENGLISH);
        assert!(!flips.dialogues.is_empty());
        let back = parse_corpus(&corpus_to_json(&flips).unwrap(), TaskId::FLIP_ENGLISH).unwrap();
        assert_eq!(back, flips);
    }

    #[test]
    fn every_entry_ends_in_a_flip() {
        let flips = flip_corpus(&SyntheticSpec::default(), TaskId::FLIP_CODE_MIXED);
        for d in &flips.dialogues {
            let t = d.len() - 1;
            let who = &d.utterances[t].speaker;
            let prev = d.utterances[..t].iter().rposition(|u| &u.speaker == who).unwrap();
            assert_ne!(d.utterances[prev].emotion, d.utterances[t].emotion);
            assert_eq!(d.triggers.as_ref().unwrap()[t - 1], 1);
        }
        assert!(dataset_stats(&flips).episodes <= 20);
    }
}
