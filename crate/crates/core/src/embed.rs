//! Text embedding: the tokenizer, the signed feature-hashing reference
//! embedder, a remote HTTP embedder and cosine similarity.
//!
//! The reference embedder needs no model and no network. Every token is
//! hashed with FNV-1a 64; the low bits pick one of 256 buckets and bit 63
//! picks the sign. Term frequencies accumulate per bucket and the result is
//! L2-normalized, so identical token multisets always produce identical
//! vectors on every platform.

use std::ops::Range;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dimension of the reference embedder.
pub const REFERENCE_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// A dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Raw dot product over equal-length slices.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity. Returns 0 when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a.values(), b.values()) / (na * nb)).clamp(-1.0, 1.0))
}

/// Splits text into an ordered token list.
pub trait Tokenizer: Send + Sync {
    /// Byte spans of every token in the original text.
    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    fn tokenize(&self, text: &str) -> Vec<String> {
        self.spans(text)
            .into_iter()
            .map(|span| text[span].to_lowercase())
            .collect()
    }

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

/// Lowercases, then splits on every maximal run of non-alphanumeric
/// characters. Empty tokens are dropped.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices() {
            match (ch.is_alphanumeric(), start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }
}

/// Anything that can turn text into a vector.
#[async_trait]
pub trait Embedder: Send + Sync {
    /// Output dimension.
    fn dim(&self) -> usize;

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Signed feature hashing over [`WordTokenizer`] tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl HashEmbedder {
    /// Bucket index and sign of a single token.
    pub fn bucket(token: &str) -> (usize, f64) {
        let hash = fnv1a64(token.as_bytes());
        let index = (hash % REFERENCE_DIM as u64) as usize;
        let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
        (index, sign)
    }

    pub fn embed_sync(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; REFERENCE_DIM];
        for token in WordTokenizer.tokenize(text) {
            let (index, sign) = Self::bucket(&token);
            values[index] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector(values)
    }
}

#[async_trait]
impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        REFERENCE_DIM
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_sync(text))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedReply {
    embedding: Vec<f64>,
}

/// Remote provider: `POST {"input": text}` answered by `{"embedding": [..]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: reqwest::Client,
    url: String,
    dim: usize,
    in_flight: std::sync::Arc<tokio::sync::Semaphore>,
}

impl RemoteEmbedder {
    pub fn new(
        url: impl Into<String>,
        dim: usize,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .unwrap_or_default();
        Self {
            client,
            url: url.into(),
            dim,
            in_flight: std::sync::Arc::new(tokio::sync::Semaphore::new(max_in_flight.max(1))),
        }
    }
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest { input: text })
            .send()
            .await
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::Provider(format!("HTTP {}", resp.status())));
        }
        let reply: EmbedReply = resp
            .json()
            .await
            .map_err(|e| EmbedError::Provider(format!("malformed reply: {e}")))?;
        if reply.embedding.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                actual: reply.embedding.len(),
            });
        }
        if reply.embedding.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Provider("non-finite value in embedding".into()));
        }
        Ok(EmbeddingVector(reply.embedding))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        let toks = WordTokenizer.tokenize("Fed holds, rates @ 5.25%!  S&P500");
        assert_eq!(toks, ["fed", "holds", "rates", "5", "25", "s", "p500"]);
        assert!(WordTokenizer.tokenize("  ,,; ").is_empty());
        assert_eq!(
            WordTokenizer.tokenize("Ünïcode straße"),
            ["ünïcode", "straße"]
        );
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = HashEmbedder.embed_sync("");
        assert_eq!(v.dim(), 256);
        assert!(v.is_zero());
        assert!(HashEmbedder.embed_sync("?!").is_zero());
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let a = HashEmbedder.embed_sync("Apple reports record quarterly revenue");
        let b = HashEmbedder.embed_sync("Apple reports record quarterly revenue");
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_buckets_give_zero_cosine() {
        let left = ["rates", "inflation", "bond"];
        let right = ["apple", "earnings", "guidance"];
        let buckets = |toks: &[&str]| {
            toks.iter()
                .map(|t| HashEmbedder::bucket(t).0)
                .collect::<Vec<_>>()
        };
        let (lb, rb) = (buckets(&left), buckets(&right));
        assert!(
            lb.iter().all(|b| !rb.contains(b)),
            "fixture tokens collide: {lb:?} {rb:?}"
        );
        let a = HashEmbedder.embed_sync(&left.join(" "));
        let b = HashEmbedder.embed_sync(&right.join(" "));
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_basics() {
        let v = EmbeddingVector::new(vec![0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        assert!((cosine(&v, &v.scaled(-1.0)).unwrap() + 1.0).abs() < 1e-9);
        let x = EmbeddingVector::new(vec![1.0, 0.0]);
        let y = EmbeddingVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        assert_eq!(cosine(&x, &EmbeddingVector::zeros(2)).unwrap(), 0.0);
        assert!(matches!(
            cosine(&x, &v),
            Err(EmbedError::DimensionMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }

    proptest! {
        #[test]
        fn multiset_equal_texts_embed_identically(words in prop::collection::vec("[a-z]{1,6}", 1..12), seed in any::<u64>()) {
            let mut shuffled = words.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(i as u64 + 7) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(HashEmbedder.embed_sync(&words.join(" ")), HashEmbedder.embed_sync(&shuffled.join(", ")));
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 8),
            b in prop::collection::vec(-10.0f64..10.0, 8),
            alpha in 0.001f64..1000.0,
        ) {
            let a = EmbeddingVector::new(a);
            let b = EmbeddingVector::new(b);
            let base = cosine(&a, &b).unwrap();
            let scaled = cosine(&a.scaled(alpha), &b).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
