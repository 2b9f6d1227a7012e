//! Utterance vectors and one-hot speaker/emotion features.

mod cache;
mod encoder;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

pub use cache::{read_cache, write_cache, CacheHeader, EmbeddingTable, FORMAT_VERSION, MAGIC};
pub use encoder::{
    mean_pool_excluding_specials, Encoder, EncoderConfig, EncoderOutput, Pooling, Provider,
    StubEncoder, TeiEncoder, VoyageEncoder, TEI_URL_VAR, VOYAGE_KEY_VAR,
};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_SPEAKERS: usize = 6;

/// The `k` most frequent speakers of a training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerVocab {
    pub top: Vec<String>,
    pub k: usize,
}

impl SpeakerVocab {
    /// Ranks by descending count, ties broken lexicographically.
    pub fn from_counts(counts: &HashMap<String, u64>, k: usize) -> Self {
        let mut ranked: Vec<(&String, u64)> = counts.iter().map(|(s, &c)| (s, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        SpeakerVocab {
            top: ranked.into_iter().take(k).map(|(s, _)| s.clone()).collect(),
            k,
        }
    }

    /// Counts every utterance of every entry in the corpus.
    pub fn from_corpus(corpus: &Corpus, k: usize) -> Self {
        let mut counts = HashMap::new();
        for s in corpus.dialogues.iter().flat_map(|d| d.speakers()) {
            *counts.entry(s.to_string()).or_insert(0u64) += 1;
        }
        Self::from_counts(&counts, k)
    }

    pub fn position(&self, speaker: &str) -> Option<usize> {
        self.top.iter().position(|s| s == speaker)
    }
}

pub fn speaker_one_hot(speaker: &str, vocab: &SpeakerVocab) -> Vec<f64> {
    let mut v = vec![0.0; vocab.k];
    if let Some(i) = vocab.position(speaker) {
        v[i] = 1.0;
    }
    v
}

pub fn emotion_one_hot(label: &str, label_set: &[String]) -> Result<Vec<f64>> {
    let i = label_set
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
    let mut v = vec![0.0; label_set.len()];
    v[i] = 1.0;
    Ok(v)
}

/// Fraction of utterances spoken by a speaker in `vocab`.
pub fn speaker_coverage(corpus: &Corpus, vocab: &SpeakerVocab) -> f64 {
    let total = corpus.num_utterances();
    if total == 0 {
        return 0.0;
    }
    let covered = corpus
        .dialogues
        .iter()
        .flat_map(|d| d.speakers())
        .filter(|s| vocab.position(s).is_some())
        .count();
    covered as f64 / total as f64
}

/// Embeds every utterance of `corpus`, reusing and updating the cache at
/// `cache_path`. No encoder is constructed when the cache is complete.
pub fn encode_corpus(corpus: &Corpus, cfg: &EncoderConfig, cache_path: &Path) -> Result<EmbeddingTable> {
    encode_corpus_inner(corpus, cfg, cache_path, || cfg.build())
}

/// [`encode_corpus`] with a caller-supplied encoder.
pub fn encode_corpus_with(
    corpus: &Corpus,
    cfg: &EncoderConfig,
    cache_path: &Path,
    encoder: &dyn Encoder,
) -> Result<EmbeddingTable> {
    struct Borrowed<'a>(&'a dyn Encoder);
    impl Encoder for Borrowed<'_> {
        fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EncoderOutput>> {
            self.0.encode_batch(texts)
        }
    }
    encode_corpus_inner(corpus, cfg, cache_path, || {
        Ok(Box::new(Borrowed(encoder)) as Box<dyn Encoder + '_>)
    })
}

fn encode_corpus_inner<'e, F>(
    corpus: &Corpus,
    cfg: &EncoderConfig,
    cache_path: &Path,
    build: F,
) -> Result<EmbeddingTable>
where
    F: FnOnce() -> Result<Box<dyn Encoder + 'e>>,
{
    let mut table = if cache_path.exists() {
        let t = read_cache(cache_path)?;
        if t.dim != cfg.dim {
            return Err(Error::DimMismatch {
                expected: cfg.dim,
                found: t.dim,
            });
        }
        if t.provider != cfg.provider.name() || t.model != cfg.model {
            log::warn!(
                "cache was written by {}/{}, configured encoder is {}/{}",
                t.provider,
                t.model,
                cfg.provider.name(),
                cfg.model
            );
        }
        t
    } else {
        EmbeddingTable::new(cfg.dim, cfg.provider.name(), cfg.model.clone())
    };

    let mut missing: BTreeMap<String, &str> = BTreeMap::new();
    for d in &corpus.dialogues {
        for (i, u) in d.utterances.iter().enumerate() {
            let key = d.key(i);
            if table.contains(&key) {
                continue;
            }
            if let Some(prev) = missing.insert(key.clone(), &u.text) {
                if prev != u.text {
                    return Err(Error::Validation {
                        episode: d.id.clone(),
                        message: format!("utterance key {key} maps to two different texts"),
                    });
                }
            }
        }
    }
    if missing.is_empty() {
        return Ok(table);
    }

    let pending: Vec<(String, &str)> = missing.into_iter().collect();
    let encoder = match build() {
        Ok(e) => e,
        Err(e) => {
            return Err(Error::EncoderUnavailable {
                cause: e.to_string(),
                missing: pending.into_iter().map(|(k, _)| k).collect(),
            })
        }
    };
    log::info!("encoding {} utterances", pending.len());
    let outcome = run_encoder(&*encoder, cfg, &pending, &mut table);
    // Persist whatever was encoded so an interrupted run can resume.
    write_cache(&table, cache_path)?;
    match outcome {
        Ok(()) => Ok(table),
        Err(e @ (Error::DimMismatch { .. } | Error::NonFinite(_))) => Err(e),
        Err(e) => Err(Error::EncoderUnavailable {
            cause: e.to_string(),
            missing: pending
                .into_iter()
                .map(|(k, _)| k)
                .filter(|k| !table.contains(k))
                .collect(),
        }),
    }
}

/// Fans batches out to at most `cfg.parallelism` worker threads; only the
/// calling thread writes to `table`.
fn run_encoder(
    encoder: &dyn Encoder,
    cfg: &EncoderConfig,
    pending: &[(String, &str)],
    table: &mut EmbeddingTable,
) -> Result<()> {
    let batches: Vec<&[(String, &str)]> = pending.chunks(cfg.batch_size.max(1)).collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = cfg.parallelism.clamp(1, batches.len());
    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<EncoderOutput>>)>();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, batches) = (&next, &stop, &batches);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let b = next.fetch_add(1, Ordering::Relaxed);
                let Some(batch) = batches.get(b) else { break };
                let texts: Vec<&str> = batch.iter().map(|(_, t)| *t).collect();
                let result = encoder.encode_batch(&texts);
                if result.is_err() {
                    stop.store(true, Ordering::Relaxed);
                }
                if tx.send((b, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut first_error = None;
        for (b, result) in rx {
            let outputs = match result {
                Ok(o) if o.len() == batches[b].len() => o,
                Ok(o) => {
                    first_error.get_or_insert(Error::Encoder(format!(
                        "batch of {} texts returned {} outputs",
                        batches[b].len(),
                        o.len()
                    )));
                    stop.store(true, Ordering::Relaxed);
                    continue;
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                    continue;
                }
            };
            for ((key, _), out) in batches[b].iter().zip(outputs) {
                let vector = match (cfg.pooling, out) {
                    (Pooling::MeanTokens, EncoderOutput::Tokens(t)) => mean_pool_excluding_specials(&t),
                    (Pooling::ProviderNative, EncoderOutput::Pooled(v)) => Ok(v),
                    (pooling, _) => Err(Error::Encoder(format!(
                        "encoder output does not match pooling {pooling:?}"
                    ))),
                };
                if let Err(e) = vector.and_then(|v| table.insert(key.clone(), v)) {
                    stop.store(true, Ordering::Relaxed);
                    first_error.get_or_insert(e);
                }
            }
        }
        first_error.map_or(Ok(()), Err)
    })
}

/// Looks up every utterance of `corpus`; errors with the full list of
/// missing keys.
pub fn require_complete(corpus: &Corpus, table: &EmbeddingTable) -> Result<()> {
    let missing: Vec<String> = corpus
        .dialogues
        .iter()
        .flat_map(|d| (0..d.len()).map(move |i| d.key(i)))
        .filter(|k| !table.contains(k))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingEmbeddings(missing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, TaskId};
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        inner: StubEncoder,
        calls: AtomicUsize,
    }

    impl Encoder for Counting {
        fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EncoderOutput>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.encode_batch(texts)
        }
    }

    struct Down;
    impl Encoder for Down {
        fn encode_batch(&self, _: &[&str]) -> Result<Vec<EncoderOutput>> {
            Err(Error::Encoder("connection refused".into()))
        }
    }

    fn corpus() -> Corpus {
        parse_corpus(
            r#"[{"episode":"a","speakers":["X","Y"],"utterances":["hello there","ok"],"emotions":["joy","neutral"]},
                {"episode":"b","speakers":["Y"],"utterances":["hello there"],"emotions":["joy"]}]"#,
            TaskId::RECOGNITION,
        )
        .unwrap()
    }

    #[test]
    fn second_run_hits_cache_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let cfg = EncoderConfig::stub(8, Pooling::MeanTokens, 1);
        let enc = Counting {
            inner: StubEncoder { dim: 8, seed: 1, tokens: true },
            calls: AtomicUsize::new(0),
        };
        let first = encode_corpus_with(&corpus(), &cfg, &path, &enc).unwrap();
        assert!(enc.calls.load(Ordering::SeqCst) > 0);
        enc.calls.store(0, Ordering::SeqCst);
        let second = encode_corpus_with(&corpus(), &cfg, &path, &enc).unwrap();
        assert_eq!(enc.calls.load(Ordering::SeqCst), 0);
        assert_eq!(first, second);
        // Identical texts under different keys get equal vectors.
        assert_eq!(first.get("a#0"), first.get("b#0"));
        assert_eq!(first.len(), 3);
    }

    #[test]
    fn unreachable_encoder_lists_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let cfg = EncoderConfig::stub(4, Pooling::ProviderNative, 1);
        match encode_corpus_with(&corpus(), &cfg, &path, &Down).unwrap_err() {
            Error::EncoderUnavailable { missing, .. } => assert_eq!(missing, vec!["a#0", "a#1", "b#0"]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn cache_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        encode_corpus(&corpus(), &EncoderConfig::stub(4, Pooling::ProviderNative, 1), &path).unwrap();
        let err = encode_corpus(&corpus(), &EncoderConfig::stub(5, Pooling::ProviderNative, 1), &path).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { expected: 5, found: 4 }));
    }

    #[test]
    fn vocab_ranking_and_one_hots() {
        let counts = HashMap::from([("C".to_string(), 1), ("B".to_string(), 5), ("A".to_string(), 5)]);
        let vocab = SpeakerVocab::from_counts(&counts, 2);
        assert_eq!(vocab.top, vec!["A", "B"]);
        assert_eq!(speaker_one_hot("A", &vocab), vec![1.0, 0.0]);
        assert_eq!(speaker_one_hot("C", &vocab), vec![0.0, 0.0]);

        let six = SpeakerVocab::from_counts(&counts, DEFAULT_TOP_SPEAKERS);
        assert_eq!(speaker_one_hot("A", &six), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(speaker_one_hot("nobody", &six), vec![0.0; 6]);

        let labels: Vec<String> = ["anger", "joy", "neutral"].iter().map(|s| s.to_string()).collect();
        assert_eq!(emotion_one_hot("joy", &labels).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(emotion_one_hot("fear", &labels), Err(Error::UnknownLabel(l)) if l == "fear"));
    }

    #[test]
    fn coverage_fraction() {
        let c = corpus();
        let vocab = SpeakerVocab::from_corpus(&c, 1);
        assert_eq!(vocab.top, vec!["Y"]);
        assert!((speaker_coverage(&c, &vocab) - 2.0 / 3.0).abs() < 1e-12);
    }
}
