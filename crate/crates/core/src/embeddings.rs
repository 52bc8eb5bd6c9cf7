//! Text embeddings and few-shot example selection.
//!
//! Three strategies pick graded examples from a question's pool: `None`
//! (no examples), `Random` (seeded draw without replacement) and `Rag`
//! (exact k nearest neighbours by Euclidean distance between embeddings).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Submission;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_MOCK_DIMENSION: usize = 64;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has no components")]
    ZeroDimension,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no embedding stored for submission {0}")]
    Missing(String),
    #[error("random selection requires a seed")]
    MissingSeed,
    #[error("target submission {0} is part of its own example pool")]
    TargetInPool(String),
    #[error("embedding backend error: {message}")]
    Backend { message: String, retryable: bool },
    #[error("{path}: {message}")]
    Cache { path: PathBuf, message: String },
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Backend { retryable: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDimension);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

pub fn euclidean_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dimension(),
            got: b.dimension(),
        });
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Anything that can turn text into a vector.
pub trait EmbeddingBackend: Send + Sync {
    /// Identifies the model/source; cache entries are keyed by it.
    fn tag(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Deterministic offline embedder: a pseudo-random unit vector seeded by
/// the SHA-256 of the text. Distances carry no meaning beyond identity.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension }
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_MOCK_DIMENSION)
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn tag(&self) -> String {
        format!("mock-sha256-d{}", self.dimension)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha20Rng::from_seed(seed);
        let mut values: Vec<f64> = (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        EmbeddingVector::new(values)
    }
}

/// Offline embedder based on feature hashing of lowercase word tokens.
///
/// Texts sharing vocabulary land close together, which makes it useful for
/// demos and smoke tests of retrieval without a live embedding service.
#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    dimension: usize,
}

impl HashedBagOfWords {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension }
    }
}

impl EmbeddingBackend for HashedBagOfWords {
    fn tag(&self) -> String {
        format!("hashed-bow-d{}", self.dimension)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut values = vec![0.0; self.dimension];
        let tokens = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase);
        for token in tokens {
            let digest = Sha256::digest(token.as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            values[(bucket % self.dimension as u64) as usize] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector::new(values)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    submission_id: String,
    backend_tag: String,
    dimension: usize,
    values: Vec<f64>,
}

/// Embeddings of submissions produced by a single backend.
///
/// Reads may happen concurrently through shared references; filling goes
/// through `&mut self`, so there is only ever one writer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    entries: BTreeMap<String, EmbeddingVector>,
    dimension: Option<usize>,
    backend_tag: String,
}

impl EmbeddingStore {
    pub fn new(backend_tag: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            dimension: None,
            backend_tag: backend_tag.into(),
        }
    }

    pub fn backend_tag(&self) -> &str {
        &self.backend_tag
    }

    /// Dimension shared by all entries; `None` while empty.
    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, submission_id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(submission_id)
    }

    pub fn contains(&self, submission_id: &str) -> bool {
        self.entries.contains_key(submission_id)
    }

    pub fn insert(&mut self, submission_id: impl Into<String>, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        match self.dimension {
            Some(d) if d != vector.dimension() => {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: d,
                    got: vector.dimension(),
                })
            }
            None => self.dimension = Some(vector.dimension()),
            _ => {}
        }
        self.entries.insert(submission_id.into(), vector);
        Ok(())
    }

    /// Embeds every submission that is not cached yet. Blank responses are
    /// skipped. Returns how many new embeddings were computed.
    pub fn fill<'a, I>(&mut self, backend: &dyn EmbeddingBackend, submissions: I) -> Result<usize, EmbeddingError>
    where
        I: IntoIterator<Item = &'a Submission>,
    {
        let mut added = 0;
        for s in submissions {
            if self.contains(&s.submission_id) || s.response_text.trim().is_empty() {
                continue;
            }
            let v = backend.embed(&s.response_text)?;
            self.insert(s.submission_id.clone(), v)?;
            added += 1;
        }
        Ok(added)
    }

    /// Loads the entries for `backend_tag` from a cache file. A missing file
    /// yields an empty store; entries for other backends are skipped.
    pub fn load_cache(path: &Path, backend_tag: &str) -> Result<Self, EmbeddingError> {
        let mut store = Self::new(backend_tag);
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(store),
            Err(e) => {
                return Err(EmbeddingError::Cache {
                    path: path.to_owned(),
                    message: e.to_string(),
                })
            }
        };
        for (idx, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |message: String| EmbeddingError::Cache {
                path: path.to_owned(),
                message: format!("line {}: {message}", idx + 1),
            };
            let line: CacheLine = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            if line.backend_tag != backend_tag {
                continue;
            }
            if line.values.len() != line.dimension {
                return Err(bad(format!(
                    "dimension {} but {} values",
                    line.dimension,
                    line.values.len()
                )));
            }
            let v = EmbeddingVector::new(line.values).map_err(|e| bad(e.to_string()))?;
            store.insert(line.submission_id, v).map_err(|e| bad(e.to_string()))?;
        }
        Ok(store)
    }

    /// Rewrites the cache file, keeping entries of other backends intact.
    pub fn save_cache(&self, path: &Path) -> Result<(), EmbeddingError> {
        let cache_err = |message: String| EmbeddingError::Cache {
            path: path.to_owned(),
            message,
        };
        let mut kept = Vec::new();
        if let Ok(text) = fs::read_to_string(path) {
            for raw in text.lines().filter(|l| !l.trim().is_empty()) {
                let line: CacheLine = serde_json::from_str(raw).map_err(|e| cache_err(e.to_string()))?;
                if line.backend_tag != self.backend_tag {
                    kept.push(raw.to_owned());
                }
            }
        }
        let mut out = String::new();
        for raw in kept {
            out.push_str(&raw);
            out.push('\n');
        }
        for (id, v) in &self.entries {
            let line = CacheLine {
                submission_id: id.clone(),
                backend_tag: self.backend_tag.clone(),
                dimension: v.dimension(),
                values: v.values.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
            out.push('\n');
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
        }
        let mut f = fs::File::create(path).map_err(|e| cache_err(e.to_string()))?;
        f.write_all(out.as_bytes()).map_err(|e| cache_err(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    None,
    Random,
    Rag,
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(StrategyKind::None),
            "random" => Ok(StrategyKind::Random),
            "rag" => Ok(StrategyKind::Rag),
            other => Err(format!("unknown strategy {other:?} (expected none, random or rag)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SelectionStrategy {
    pub fn none() -> Self {
        Self {
            kind: StrategyKind::None,
            k: 0,
            seed: None,
        }
    }

    pub fn random(k: usize, seed: u64) -> Self {
        Self {
            kind: StrategyKind::Random,
            k,
            seed: Some(seed),
        }
    }

    pub fn rag(k: usize) -> Self {
        Self {
            kind: StrategyKind::Rag,
            k,
            seed: None,
        }
    }
}

/// Examples chosen for one target, in prompt order.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<'a> {
    pub examples: Vec<&'a Submission>,
    /// Distance of each example to the target (RAG only).
    pub distances: Option<Vec<f64>>,
    /// The pool held fewer than `k` candidates, so all of it was used.
    pub short_pool: bool,
}

impl Selection<'_> {
    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|s| s.submission_id.clone()).collect()
    }
}

/// Picks few-shot examples for `target` from `pool`.
///
/// Random draws are seeded by the strategy seed combined with the target's
/// id, so each target gets its own reproducible draw regardless of the
/// order in which targets are processed. RAG returns the `k` nearest pool
/// members ascending by distance, ties broken by submission id.
pub fn select_examples<'a>(
    strategy: &SelectionStrategy,
    pool: &[&'a Submission],
    target: &Submission,
    store: &EmbeddingStore,
) -> Result<Selection<'a>, EmbeddingError> {
    if pool.iter().any(|s| s.submission_id == target.submission_id) {
        return Err(EmbeddingError::TargetInPool(target.submission_id.clone()));
    }
    let short_pool = strategy.kind != StrategyKind::None && pool.len() < strategy.k;
    match strategy.kind {
        StrategyKind::None => Ok(Selection {
            examples: Vec::new(),
            distances: None,
            short_pool: false,
        }),
        StrategyKind::Random => {
            let seed = strategy.seed.ok_or(EmbeddingError::MissingSeed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &target.submission_id));
            let mut order: Vec<usize> = (0..pool.len()).collect();
            let take = strategy.k.min(pool.len());
            let (drawn, _) = order.partial_shuffle(&mut rng, take);
            Ok(Selection {
                examples: drawn.iter().map(|&i| pool[i]).collect(),
                distances: None,
                short_pool,
            })
        }
        StrategyKind::Rag => {
            let target_vec = store
                .get(&target.submission_id)
                .ok_or_else(|| EmbeddingError::Missing(target.submission_id.clone()))?;
            let mut scored = pool
                .iter()
                .map(|s| {
                    let v = store
                        .get(&s.submission_id)
                        .ok_or_else(|| EmbeddingError::Missing(s.submission_id.clone()))?;
                    Ok((euclidean_distance(target_vec, v)?, *s))
                })
                .collect::<Result<Vec<(f64, &Submission)>, EmbeddingError>>()?;
            scored.sort_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.submission_id.cmp(&b.submission_id)));
            scored.truncate(strategy.k);
            Ok(Selection {
                distances: Some(scored.iter().map(|(d, _)| *d).collect()),
                examples: scored.into_iter().map(|(_, s)| s).collect(),
                short_pool,
            })
        }
    }
}

fn derive_seed(seed: u64, target_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(target_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
