//! Text embeddings and the similarity primitives every score is built on.
//!
//! Two provider kinds exist: a deterministic hashing embedder used for tests and
//! offline runs, and a remote provider speaking the common
//! `{"input": [...], "model": ...}` JSON protocol. Both sit behind
//! [`EmbeddingProvider`]; [`Embedder`] adds the content-hash cache.

use std::collections::HashMap;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Dimension of the deterministic test embedder.
pub const TEST_EMBEDDER_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension or provider mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },
    #[error("cosine similarity undefined for an all-zero vector")]
    ZeroVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub provider_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(provider_id: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            provider_id: provider_id.into(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_compatible(&self, other: &Self) -> Result<(), EmbeddingError> {
        if self.provider_id != other.provider_id || self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                left: format!("{}/{}", self.provider_id, self.dim()),
                right: format!("{}/{}", other.provider_id, other.dim()),
            });
        }
        Ok(())
    }
}

/// Standard cosine similarity in `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    a.check_compatible(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity clamped at zero, so anti-correlated text scores like unrelated text.
pub fn normalized_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_similarity(a, b).map(|c| c.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    RemoteHttp,
    DeterministicTest,
}

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn kind(&self) -> ProviderKind;
    fn dim(&self) -> usize;
    /// Embeds a batch of non-empty texts, one vector per input in order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
}

/// Hashes each lowercase token into one of `dim` buckets, counts, then L2-normalizes.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    id: String,
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(TEST_EMBEDDER_DIM)
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        Self {
            id: format!("hash-{dim}"),
            dim,
        }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0f64; self.dim];
        let lowered = text.to_lowercase();
        let mut any = false;
        for token in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            counts[bucket(token, self.dim)] += 1.0;
            any = true;
        }
        if !any {
            // Punctuation-only text still needs a non-zero vector.
            counts[bucket(lowered.trim(), self.dim)] += 1.0;
        }
        let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
        counts.iter_mut().for_each(|v| *v /= norm);
        EmbeddingVector::new(self.id.clone(), counts)
    }
}

/// FNV-1a, stable across platforms and releases.
fn bucket(token: &str, dim: usize) -> usize {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in token.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    (hash % dim as u64) as usize
}

impl EmbeddingProvider for HashingEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::DeterministicTest
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteProviderConfig {
    pub provider_id: String,
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    250
}

pub struct RemoteEmbedder {
    config: RemoteProviderConfig,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteProviderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self { config, agent }
    }

    fn request_once(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, String> {
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct Response {
            data: Vec<Item>,
        }
        let body = serde_json::json!({ "input": texts, "model": self.config.model });
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(var) = &self.config.key_env {
            let key = std::env::var(var).map_err(|_| format!("missing env var {var}"))?;
            let value = if self.config.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {key}")
            } else {
                key
            };
            request = request.header(self.config.auth_header.as_str(), value);
        }
        let mut response = request.send_json(&body).map_err(|e| e.to_string())?;
        let parsed: Response = response.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(parsed.data.into_iter().map(|i| i.embedding).collect())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.config.provider_id
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::RemoteHttp
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.request_once(texts) {
                Ok(vectors) if vectors.len() == texts.len() => {
                    if let Some(bad) = vectors.iter().find(|v| v.len() != self.config.dim) {
                        return Err(EmbeddingError::ProviderUnavailable(format!(
                            "provider returned dim {} (expected {})",
                            bad.len(),
                            self.config.dim
                        )));
                    }
                    return Ok(vectors
                        .into_iter()
                        .map(|v| EmbeddingVector::new(self.config.provider_id.clone(), v))
                        .collect());
                }
                Ok(vectors) => {
                    last_error = format!("expected {} vectors, got {}", texts.len(), vectors.len())
                }
                Err(e) => last_error = e,
            }
        }
        Err(EmbeddingError::ProviderUnavailable(last_error))
    }
}

/// Provider settings as they appear in session configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderConfig {
    DeterministicTest {
        #[serde(default = "default_test_dim")]
        dim: usize,
    },
    RemoteHttp(RemoteProviderConfig),
}

fn default_test_dim() -> usize {
    TEST_EMBEDDER_DIM
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::DeterministicTest {
            dim: TEST_EMBEDDER_DIM,
        }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Embedder {
        match self {
            ProviderConfig::DeterministicTest { dim } => Embedder::new(Arc::new(HashingEmbedder::new(*dim))),
            ProviderConfig::RemoteHttp(cfg) => Embedder::new(Arc::new(RemoteEmbedder::new(cfg.clone()))),
        }
    }
}

/// A provider plus a cache keyed by `(provider_id, sha256(text))`.
///
/// Cloning is cheap and clones share the cache.
#[derive(Clone)]
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Arc<RwLock<HashMap<(String, [u8; 32]), EmbeddingVector>>>,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("provider", &self.provider.provider_id())
            .field("cached", &self.cache.read().len())
            .finish()
    }
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: Arc::default(),
        }
    }

    pub fn deterministic() -> Self {
        Self::new(Arc::new(HashingEmbedder::default()))
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().len()
    }

    fn key(&self, text: &str) -> (String, [u8; 32]) {
        (self.provider.provider_id().to_owned(), Sha256::digest(text.as_bytes()).into())
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed_many(&[text]).map(|mut v| v.remove(0))
    }

    /// Embeds several texts, sending only cache misses to the provider.
    pub fn embed_many(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        let keys: Vec<_> = texts.iter().map(|t| self.key(t)).collect();
        let mut missing: Vec<usize> = Vec::new();
        {
            let cache = self.cache.read();
            for (i, key) in keys.iter().enumerate() {
                if !cache.contains_key(key) && !missing.iter().any(|&j| keys[j] == *key) {
                    missing.push(i);
                }
            }
        }
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let vectors = self.provider.embed_batch(&batch)?;
            let mut cache = self.cache.write();
            for (i, vector) in missing.into_iter().zip(vectors) {
                cache.entry(keys[i].clone()).or_insert(vector);
            }
        }
        let cache = self.cache.read();
        Ok(keys.iter().map(|k| cache[k].clone()).collect())
    }

    /// Normalized similarity of two texts; either side empty yields 0.
    pub fn text_similarity(&self, a: &str, b: &str) -> Result<f64, EmbeddingError> {
        if a.trim().is_empty() || b.trim().is_empty() {
            return Ok(0.0);
        }
        let v = self.embed_many(&[a, b])?;
        normalized_similarity(&v[0], &v[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new("t", values.to_vec())
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -2.0, 5.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn normalized_clamps_at_zero() {
        let a = v(&[1.0, 2.0]);
        let neg = v(&[-1.0, -2.0]);
        assert!((normalized_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_similarity(&a, &neg).unwrap(), 0.0);
        assert_eq!(normalized_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn mismatches_and_zero_vectors_are_errors() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        let other = EmbeddingVector::new("u", vec![1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&v(&[1.0, 0.0]), &other),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        assert_eq!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(EmbeddingError::ZeroVector));
    }

    #[test]
    fn test_embedder_is_deterministic_and_cached() {
        let e = Embedder::deterministic();
        let a = e.embed_text("Graph neural networks for chemistry").unwrap();
        let b = e.embed_text("Graph neural networks for chemistry").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), TEST_EMBEDDER_DIM);
        assert_eq!(e.cached_len(), 1);
        let fresh = HashingEmbedder::default().embed_one("Graph neural networks for chemistry");
        assert_eq!(a, fresh);
    }

    #[test]
    fn empty_text_rejected() {
        let e = Embedder::deterministic();
        assert_eq!(e.embed_text(""), Err(EmbeddingError::EmptyText));
        assert_eq!(e.embed_text("   \n"), Err(EmbeddingError::EmptyText));
        assert!(e.embed_text("?!").is_ok());
    }

    #[test]
    fn unrelated_texts_are_dissimilar() {
        // Oracle: count shared hashed buckets by hand. These two texts share no
        // token, so similarity is only bucket collisions.
        let e = Embedder::deterministic();
        let s = e
            .text_similarity(
                "transformer attention scaling laws for language models",
                "offshore wind turbine blade corrosion inspection drones",
            )
            .unwrap();
        assert!(s < 0.9, "similarity {s}");
        let h = HashingEmbedder::default();
        let a = h.embed_one("transformer attention scaling laws for language models");
        let b = h.embed_one("offshore wind turbine blade corrosion inspection drones");
        let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
        assert!((dot.max(0.0) - s).abs() < 1e-12);
    }

    #[test]
    fn overlapping_texts_score_between() {
        let e = Embedder::deterministic();
        let s = e.text_similarity("alpha beta gamma delta", "alpha beta epsilon zeta").unwrap();
        assert!(s > 0.3 && s < 1.0, "{s}");
    }
}
