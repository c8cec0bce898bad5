//! Text embedding providers.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retry::{with_retry, RetryPolicy, Transient};
use crate::tokenize::RuleTokenizer;

pub const DEFAULT_DIMENSION: usize = 1536;
pub const DEFAULT_REMOTE_MODEL: &str = "text-embedding-ada-002";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding has {actual} values, expected {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("embedding contains a non-finite value at {0}")]
    NonFinite(usize),
    #[error("embedding provider failed after {attempts} tries: {message}")]
    Provider { attempts: u32, status: Option<u16>, message: String },
    #[error("embedding provider misconfigured: {0}")]
    Config(String),
}

/// A fixed-length, finite embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn with_dimension(values: Vec<f32>, dimension: usize) -> Result<Self, EmbedError> {
        if values.len() != dimension {
            return Err(EmbedError::Dimension { expected: dimension, actual: values.len() });
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbedError;
    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Cosine similarity accumulated in `f64`. Zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// What produced a set of vectors; persisted next to the index so queries
/// use the same provider as the build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum EmbedderSpec {
    HashProjection { dimension: usize, seed: u64 },
    Remote { dimension: usize, model: String },
}

impl EmbedderSpec {
    pub fn dimension(&self) -> usize {
        match self {
            EmbedderSpec::HashProjection { dimension, .. } | EmbedderSpec::Remote { dimension, .. } => *dimension,
        }
    }
}

pub trait Embedder: Send + Sync + fmt::Debug {
    fn dimension(&self) -> usize;
    fn spec(&self) -> EmbedderSpec;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

pub type SharedEmbedder = Arc<dyn Embedder>;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic offline embedder.
///
/// Each lowercased token hashes (with the seed) to a pseudo-random ±1
/// vector; a text's embedding is the normalized sum over its tokens.
/// Texts without tokens map to the vector of a reserved empty token.
#[derive(Debug, Clone)]
pub struct HashProjectionEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashProjectionEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    fn accumulate(&self, token: &str, acc: &mut [f64]) {
        let mut state = fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17);
        let mut bits = 0u64;
        for (i, slot) in acc.iter_mut().enumerate() {
            if i % 64 == 0 {
                bits = splitmix64(&mut state);
            }
            *slot += if bits & (1 << (i % 64)) != 0 { 1.0 } else { -1.0 };
        }
    }
}

impl Embedder for HashProjectionEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec::HashProjection { dimension: self.dimension, seed: self.seed }
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut acc = vec![0.0f64; self.dimension];
        let mut any = false;
        for tok in RuleTokenizer.tokens(text) {
            self.accumulate(&tok.to_lowercase(), &mut acc);
            any = true;
        }
        if !any {
            self.accumulate("\u{0}empty", &mut acc);
        }
        let mut norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Tokens cancelled exactly; fall back to the first token axis.
            acc[0] = 1.0;
            norm = 1.0;
        }
        EmbeddingVector::new(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug)]
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

#[derive(Debug)]
struct CallError {
    status: Option<u16>,
    message: String,
    transient: bool,
}

impl Transient for CallError {
    fn is_transient(&self) -> bool {
        self.transient
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dimension: usize,
        retry: RetryPolicy,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            dimension,
            retry,
            agent: config.into(),
        }
    }

    fn call(&self, text: &str) -> Result<Vec<f32>, CallError> {
        let url = format!("{}/embeddings", self.endpoint);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let mut resp = req
            .send_json(&body)
            .map_err(|e| CallError { status: None, message: e.to_string(), transient: true })?;
        let status = resp.status().as_u16();
        if status != 200 {
            let message = resp.body_mut().read_to_string().unwrap_or_default();
            let transient = status == 429 || status >= 500;
            return Err(CallError { status: Some(status), message, transient });
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| CallError { status: Some(status), message: e.to_string(), transient: false })?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| CallError { status: Some(status), message: "empty data array".into(), transient: false })
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec::Remote { dimension: self.dimension, model: self.model.clone() }
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut tries = 0;
        let values = with_retry(&self.retry, |n| {
            tries = n;
            self.call(text)
        })
        .map_err(|e| EmbedError::Provider { attempts: tries, status: e.status, message: e.message })?;
        EmbeddingVector::with_dimension(values, self.dimension)
    }
}
