//! Pluggable text-embedding contract and the deterministic default embedder.
//!
//! The default is character-n-gram feature hashing: no weights, fully
//! reproducible, good enough to make cosine retrieval meaningful in tests.
//! Production deployments bind a remote embedding endpoint behind the same
//! trait.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed-length real vector plus its dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub dim: usize,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        let dim = values.len();
        Self { values, dim }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("embedder mismatch: index built with {expected:?}, got {actual:?}")]
pub struct EmbedderMismatch {
    pub expected: String,
    pub actual: String,
}

/// Any map text -> fixed-dim vector. The fingerprint identifies the embedder
/// configuration so indices refuse queries embedded under a different one.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;

    /// name + dim + config hash; stored in index sidecars.
    fn fingerprint(&self) -> String {
        format!("{}:{}", self.name(), self.dim())
    }
}

/// Deterministic character-n-gram feature-hashing embedder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    ngram: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, ngram: usize, seed: u64) -> Self {
        assert!(dim > 0 && ngram > 0);
        Self { dim, ngram, seed }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256, 3, 0x5eed)
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "hash-ngram"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0f32; self.dim];
        let lower = text.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        if chars.is_empty() {
            return EmbeddingVector::new(values);
        }
        let n = self.ngram.min(chars.len());
        for window in chars.windows(n) {
            let mut h = self.seed;
            for c in window {
                h = splitmix64(h ^ *c as u64);
            }
            let slot = (h % self.dim as u64) as usize;
            // second hash bit gives signed counts, which keeps unrelated
            // texts near-orthogonal
            let sign = if splitmix64(h) & 1 == 0 { 1.0 } else { -1.0 };
            values[slot] += sign;
        }
        EmbeddingVector::new(values)
    }

    fn fingerprint(&self) -> String {
        format!("{}{}:{}:seed{:x}", self.name(), self.ngram, self.dim, self.seed)
    }
}

/// SplitMix64 mixer; the deterministic hashing primitive used across the
/// crate for seed-derived streams.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Cosine similarity computed in f64 for stable, reproducible rankings.
/// Vectors are stored unnormalized and normalized here, at comparison time.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}
