use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

pub const DEFAULT_DIM: usize = 384;
const NORM_TOLERANCE: f64 = 1e-6;

/// A unit-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `raw` to unit length. Zero or non-finite vectors are rejected.
    pub fn normalize(raw: Vec<f32>) -> Result<Self> {
        let norm = raw.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidInput("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Embedding(raw.into_iter().map(|x| (f64::from(x) / norm) as f32).collect()))
    }

    /// Wraps a vector already known to be unit norm (e.g. read back from disk).
    pub fn from_unit(raw: Vec<f32>) -> Result<Self> {
        let norm = raw.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidInput(format!("vector norm {norm} is not 1")));
        }
        Ok(Embedding(raw))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>>;

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::EmbeddingUnavailable("backend returned no vector".into()))
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xAC00..=0xD7AF | 0xF900..=0xFAFF)
}

/// Lowercased alphanumeric runs; each CJK character is its own token.
pub fn mock_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Deterministic bag-of-hashed-tokens embedder for tests and model-free
/// deployments: each token goes to bucket `fnv1a64(token) % dim`, counts are
/// L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    dim: usize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        MockEmbedder { dim }
    }

    fn embed_one(&self, text: &str) -> Result<Embedding> {
        if text.is_empty() {
            return Err(Error::InvalidInput("cannot embed empty text".into()));
        }
        let mut counts = vec![0f32; self.dim];
        let tokens = mock_tokens(text);
        if tokens.is_empty() {
            return Err(Error::InvalidInput(format!("no tokens in {text:?}")));
        }
        for tok in tokens {
            counts[(fnv1a64(tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Embedding::normalize(counts)
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder::new(DEFAULT_DIM)
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedReply {
    vectors: Vec<Vec<f32>>,
}

/// `POST { "texts": [..] }` → `{ "vectors": [[..]] }`.
pub struct HttpEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        HttpEmbedder {
            url: url.into(),
            dim,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidInput("cannot embed empty text".into()));
        }
        let reply: EmbedReply = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Error::EmbeddingUnavailable(e.to_string()))?
            .into_json()
            .map_err(|e| Error::EmbeddingUnavailable(e.to_string()))?;
        if reply.vectors.len() != texts.len() {
            return Err(Error::EmbeddingUnavailable(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                reply.vectors.len()
            )));
        }
        reply
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                Embedding::normalize(v).map_err(|e| Error::EmbeddingUnavailable(e.to_string()))
            })
            .collect()
    }
}
