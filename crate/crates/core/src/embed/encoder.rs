//! Encoder adapters.
//!
//! * `stub`: deterministic seeded hash-to-vector encoder; no network.
//! * `tei`: a text-embeddings-inference server's `/embed_all` route, which
//!   returns per-token vectors. Base URL from `FLIPKIT_TEI_URL`
//!   (default `http://localhost:8080`).
//! * `voyage`: the Voyage AI embeddings API. Key from `VOYAGE_API_KEY`.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskId;
use crate::error::{Error, Result};

pub const TEI_URL_VAR: &str = "FLIPKIT_TEI_URL";
pub const VOYAGE_KEY_VAR: &str = "VOYAGE_API_KEY";
const VOYAGE_URL: &str = "https://api.voyageai.com/v1/embeddings";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over token vectors, excluding the leading and trailing special tokens.
    MeanTokens,
    /// Sentence vector exactly as returned by the provider.
    ProviderNative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Stub,
    Tei,
    Voyage,
}

impl Provider {
    pub fn name(self) -> &'static str {
        match self {
            Provider::Stub => "stub",
            Provider::Tei => "tei",
            Provider::Voyage => "voyage",
        }
    }
}

impl std::str::FromStr for Provider {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(Provider::Stub),
            "tei" => Ok(Provider::Tei),
            "voyage" => Ok(Provider::Voyage),
            other => Err(Error::Invalid(format!("unknown provider {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub provider: Provider,
    pub model: String,
    pub pooling: Pooling,
    /// Provider-specific input hint, e.g. `document`.
    pub query_hint: Option<String>,
    pub dim: usize,
    /// Seed of the stub encoder.
    pub seed: u64,
    /// Concurrent encoder requests.
    pub parallelism: usize,
    pub batch_size: usize,
}

impl EncoderConfig {
    /// Encoder used for each task: a code-mixed BERT with token averaging for
    /// tasks 1-2, a document-style sentence embedding service for task 3.
    pub fn for_task(task: TaskId) -> Self {
        if task == TaskId::FLIP_ENGLISH {
            EncoderConfig {
                provider: Provider::Voyage,
                model: "voyage-lite-02-instruct".into(),
                pooling: Pooling::ProviderNative,
                query_hint: Some("document".into()),
                dim: 1024,
                seed: 0,
                parallelism: 4,
                batch_size: 64,
            }
        } else {
            EncoderConfig {
                provider: Provider::Tei,
                model: "l3cube-pune/hing-bert".into(),
                pooling: Pooling::MeanTokens,
                query_hint: None,
                dim: 768,
                seed: 0,
                parallelism: 4,
                batch_size: 32,
            }
        }
    }

    pub fn stub(dim: usize, pooling: Pooling, seed: u64) -> Self {
        EncoderConfig {
            provider: Provider::Stub,
            model: "stub".into(),
            pooling,
            query_hint: None,
            dim,
            seed,
            parallelism: 4,
            batch_size: 16,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Encoder>> {
        Ok(match self.provider {
            Provider::Stub => Box::new(StubEncoder {
                dim: self.dim,
                seed: self.seed,
                tokens: self.pooling == Pooling::MeanTokens,
            }),
            Provider::Tei => Box::new(TeiEncoder::from_env()?),
            Provider::Voyage => Box::new(VoyageEncoder::from_env(
                &self.model,
                self.query_hint.as_deref(),
            )?),
        })
    }
}

/// What an encoder returns for one text.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderOutput {
    Tokens(Vec<Vec<f32>>),
    Pooled(Vec<f32>),
}

pub trait Encoder: Send + Sync {
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EncoderOutput>>;
}

/// Mean of token vectors, dropping the first and last (begin/end special)
/// tokens. Sequences with no inner tokens fall back to all tokens.
pub fn mean_pool_excluding_specials(tokens: &[Vec<f32>]) -> Result<Vec<f32>> {
    let inner = if tokens.len() > 2 {
        &tokens[1..tokens.len() - 1]
    } else {
        tokens
    };
    let Some(first) = inner.first() else {
        return Err(Error::Encoder("encoder returned no tokens".into()));
    };
    let dim = first.len();
    let mut acc = vec![0f64; dim];
    for t in inner {
        if t.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: t.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(t) {
            *a += f64::from(x);
        }
    }
    let n = inner.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Deterministic encoder: every token (or whole text) maps to a seeded
/// pseudo-random vector in `[-1, 1)`.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub dim: usize,
    pub seed: u64,
    pub tokens: bool,
}

impl StubEncoder {
    fn vector_for(&self, piece: &str) -> Vec<f32> {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        piece.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }
}

impl Encoder for StubEncoder {
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EncoderOutput>> {
        Ok(texts
            .iter()
            .map(|text| {
                if self.tokens {
                    let mut toks = vec![self.vector_for("[CLS]")];
                    toks.extend(text.split_whitespace().map(|w| self.vector_for(w)));
                    toks.push(self.vector_for("[SEP]"));
                    EncoderOutput::Tokens(toks)
                } else {
                    EncoderOutput::Pooled(self.vector_for(text))
                }
            })
            .collect())
    }
}

fn http_client() -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .map_err(|e| Error::Encoder(e.to_string()))
}

pub struct TeiEncoder {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl TeiEncoder {
    pub fn from_env() -> Result<Self> {
        let base_url = std::env::var(TEI_URL_VAR).unwrap_or_else(|_| "http://localhost:8080".into());
        Ok(TeiEncoder {
            base_url: base_url.trim_end_matches('/').to_string(),
            client: http_client()?,
        })
    }
}

impl Encoder for TeiEncoder {
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EncoderOutput>> {
        let resp = self
            .client
            .post(format!("{}/embed_all", self.base_url))
            .json(&serde_json::json!({ "inputs": texts }))
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Encoder(e.to_string()))?;
        let tokens: Vec<Vec<Vec<f32>>> = resp.json().map_err(|e| Error::Encoder(e.to_string()))?;
        if tokens.len() != texts.len() {
            return Err(Error::Encoder(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                tokens.len()
            )));
        }
        Ok(tokens.into_iter().map(EncoderOutput::Tokens).collect())
    }
}

pub struct VoyageEncoder {
    api_key: String,
    model: String,
    input_type: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct VoyageResponse {
    data: Vec<VoyageItem>,
}

#[derive(Deserialize)]
struct VoyageItem {
    embedding: Vec<f32>,
    index: usize,
}

impl VoyageEncoder {
    pub fn from_env(model: &str, input_type: Option<&str>) -> Result<Self> {
        let api_key = std::env::var(VOYAGE_KEY_VAR)
            .map_err(|_| Error::Encoder(format!("{VOYAGE_KEY_VAR} is not set")))?;
        Ok(VoyageEncoder {
            api_key,
            model: model.to_string(),
            input_type: input_type.map(str::to_string),
            client: http_client()?,
        })
    }
}

impl Encoder for VoyageEncoder {
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EncoderOutput>> {
        let mut body = serde_json::json!({ "input": texts, "model": self.model });
        if let Some(t) = &self.input_type {
            body["input_type"] = serde_json::Value::String(t.clone());
        }
        let resp = self
            .client
            .post(VOYAGE_URL)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Encoder(e.to_string()))?;
        let mut parsed: VoyageResponse = resp.json().map_err(|e| Error::Encoder(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(Error::Encoder(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed
            .data
            .into_iter()
            .map(|d| EncoderOutput::Pooled(d.embedding))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_drops_special_tokens() {
        let toks = vec![vec![100.0, 100.0], vec![1.0, 2.0], vec![3.0, 4.0], vec![-50.0, 9.0]];
        assert_eq!(mean_pool_excluding_specials(&toks).unwrap(), vec![2.0, 3.0]);
        assert_eq!(mean_pool_excluding_specials(&toks[..1]).unwrap(), vec![100.0, 100.0]);
        assert!(mean_pool_excluding_specials(&[]).is_err());
    }

    #[test]
    fn stub_is_deterministic_per_text() {
        let e = StubEncoder { dim: 5, seed: 3, tokens: false };
        let out = e.encode_batch(&["same", "same", "other"]).unwrap();
        assert_eq!(out[0], out[1]);
        assert_ne!(out[0], out[2]);
        let t = StubEncoder { dim: 5, seed: 3, tokens: true };
        match &t.encode_batch(&["two words"]).unwrap()[0] {
            EncoderOutput::Tokens(v) => assert_eq!(v.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn task_defaults() {
        assert_eq!(EncoderConfig::for_task(TaskId::FLIP_ENGLISH).dim, 1024);
        assert_eq!(EncoderConfig::for_task(TaskId::RECOGNITION).pooling, Pooling::MeanTokens);
        assert_eq!("voyage".parse::<Provider>().unwrap(), Provider::Voyage);
    }
}
