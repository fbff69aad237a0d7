//! Text embeddings: pluggable backends, a persistent content-addressed cache,
//! and cosine similarity.
//!
//! Cache file layout (little endian, version 1):
//!
//! ```text
//! magic   b"GCEMBED\0"     8 bytes
//! version u32              = 1
//! count   u64
//! count × { key [u8; 32] (sha256 of backend id, 0x00, text)
//!           dim u32
//!           values [f32; dim] }
//! ```
//!
//! Entries are written sorted by key so the file is a pure function of its
//! contents.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::QaRecord;

pub const DEFAULT_DIM: usize = 1024;

const CACHE_MAGIC: &[u8; 8] = b"GCEMBED\0";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding backend unreachable (status {status:?}): {message}")]
    Unreachable {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },
    #[error("embedding backend protocol error: {0}")]
    Protocol(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector has non-finite entries")]
    NonFinite,
    #[error("cosine undefined for zero-norm vector")]
    ZeroNorm,
    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("failed to embed {} record(s): {}", failed.len(), failed.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(", "))]
    Partial { failed: Vec<(String, String)> },
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Unreachable { retryable: true, .. })
    }
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

/// Fixed-dimension embedding stored in single precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Cosine similarity in double precision.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Anything that turns texts into vectors.
pub trait EmbeddingBackend: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

/// Deterministic mock: a pseudorandom unit vector seeded by the sha256 of the
/// text. Equal texts map to equal vectors; distinct texts are nearly
/// orthogonal in high dimension.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl EmbeddingBackend for HashEmbedder {
    fn id(&self) -> String {
        format!("mock-hash-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let seed: [u8; 32] = Sha256::digest(t.as_bytes()).into();
                let mut rng = ChaCha8Rng::from_seed(seed);
                let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                raw.iter().map(|v| (v / norm) as f32).collect()
            })
            .collect())
    }
}

/// Deterministic mock: component `i` counts occurrences of the `i`-th
/// distinct whitespace token (first-appearance order), zero padded to `dim`.
/// Tokens past `dim` are ignored.
#[derive(Debug, Clone)]
pub struct TokenCountEmbedder {
    pub dim: usize,
}

impl EmbeddingBackend for TokenCountEmbedder {
    fn id(&self) -> String {
        format!("mock-token-count-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut slots: HashMap<String, usize> = HashMap::new();
                let mut v = vec![0.0f32; self.dim];
                for tok in tokens(t) {
                    let next = slots.len();
                    let slot = *slots.entry(tok).or_insert(next);
                    if slot < self.dim {
                        v[slot] += 1.0;
                    }
                }
                v
            })
            .collect())
    }
}

/// Deterministic mock: hashed bag of words. Order-insensitive, so texts with
/// the same multiset of tokens embed identically.
#[derive(Debug, Clone)]
pub struct BagOfWordsEmbedder {
    pub dim: usize,
}

impl BagOfWordsEmbedder {
    fn bucket(&self, token: &str) -> usize {
        let h = Sha256::digest(token.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&h[..8]);
        (u64::from_le_bytes(b) % self.dim as u64) as usize
    }
}

impl EmbeddingBackend for BagOfWordsEmbedder {
    fn id(&self) -> String {
        format!("mock-bow-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0f32; self.dim];
                for tok in tokens(t) {
                    let tok: String = tok.chars().filter(|c| c.is_alphanumeric()).collect();
                    if !tok.is_empty() {
                        v[self.bucket(&tok)] += 1.0;
                    }
                }
                v
            })
            .collect())
    }
}

/// Lookup table backend, for hand-built fixtures.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder {
    pub name: String,
    pub table: HashMap<String, Vec<f32>>,
}

impl EmbeddingBackend for FixedEmbedder {
    fn id(&self) -> String {
        format!("fixed-{}", self.name)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.table.get(t).cloned().ok_or_else(|| EmbeddingError::Unreachable {
                    status: Some(404),
                    message: format!("no fixture vector for {t:?}"),
                    retryable: false,
                })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

/// Client for `POST {base}/v1/embed`.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            client,
        }
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let resp = self
            .client
            .post(format!("{}/v1/embed", self.base_url))
            .json(&EmbedRequest {
                texts,
                model: &self.model,
            })
            .send()
            .map_err(|e| EmbeddingError::Unreachable {
                status: None,
                message: e.to_string(),
                retryable: true,
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbeddingError::Unreachable {
                status: Some(status.as_u16()),
                message: resp.text().unwrap_or_default(),
                retryable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| EmbeddingError::Protocol(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbeddingError::Protocol(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        if let Some(v) = body.vectors.iter().find(|v| v.len() != body.dim) {
            return Err(EmbeddingError::Protocol(format!(
                "response advertises dim {} but carries a {}-dim vector",
                body.dim,
                v.len()
            )));
        }
        Ok(body
            .vectors
            .into_iter()
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .collect())
    }
}

/// Content-addressed vector cache, safe for concurrent use.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<[u8; 32], Vec<f32>>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the cache at `path`, loading it if the file exists.
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            read_cache(path)?
        } else {
            HashMap::new()
        };
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
        })
    }

    pub fn key(backend_id: &str, text: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.finalize().into()
    }

    pub fn get(&self, backend_id: &str, text: &str) -> Option<Vec<f32>> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&Self::key(backend_id, text))
            .cloned()
    }

    pub fn insert(&self, backend_id: &str, text: &str, values: Vec<f32>) {
        self.entries
            .write()
            .expect("cache lock")
            .insert(Self::key(backend_id, text), values);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the cache to its backing file (no-op for in-memory caches).
    pub fn persist(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let entries = self.entries.read().expect("cache lock");
        let sorted: BTreeMap<&[u8; 32], &Vec<f32>> = entries.iter().collect();
        let io_err = |e: std::io::Error| EmbeddingError::Cache {
            path: path.clone(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
            w.write_all(CACHE_MAGIC).map_err(io_err)?;
            w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io_err)?;
            w.write_all(&(sorted.len() as u64).to_le_bytes()).map_err(io_err)?;
            for (key, values) in sorted {
                w.write_all(key).map_err(io_err)?;
                w.write_all(&(values.len() as u32).to_le_bytes()).map_err(io_err)?;
                for v in values {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
            w.flush().map_err(io_err)?;
        }
        std::fs::rename(&tmp, path).map_err(io_err)
    }
}

fn read_cache(path: &Path) -> Result<HashMap<[u8; 32], Vec<f32>>> {
    let bad = |message: String| EmbeddingError::Cache {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| bad(format!("truncated: {e}")));
    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(bad("not an embedding cache".into()));
    }
    let mut u32b = [0u8; 4];
    read(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut u64b = [0u8; 8];
    read(&mut u64b)?;
    let count = u64::from_le_bytes(u64b);
    let mut out = HashMap::new();
    for _ in 0..count {
        let mut key = [0u8; 32];
        read(&mut key)?;
        read(&mut u32b)?;
        let dim = u32::from_le_bytes(u32b) as usize;
        let mut raw = vec![0u8; dim * 4];
        read(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(key, values);
    }
    Ok(out)
}

/// Backend + cache + dimension check.
pub struct Embedder {
    backend: Box<dyn EmbeddingBackend>,
    cache: EmbeddingCache,
    dim: usize,
    parallelism: usize,
    batch_size: usize,
}

impl Embedder {
    pub fn new(backend: Box<dyn EmbeddingBackend>, cache: EmbeddingCache, dim: usize) -> Self {
        Self {
            backend,
            cache,
            dim,
            parallelism: 4,
            batch_size: 32,
        }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    fn check(&self, values: Vec<f32>) -> Result<EmbeddingVector> {
        if values.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        EmbeddingVector::new(values)
    }

    /// Embeds texts, serving cache hits locally and sending only misses.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let id = self.backend.id();
        let mut out: Vec<Option<Vec<f32>>> = texts.iter().map(|t| self.cache.get(&id, t)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.backend.embed(&batch)?;
            if fresh.len() != batch.len() {
                return Err(EmbeddingError::Protocol(format!(
                    "asked for {} vectors, got {}",
                    batch.len(),
                    fresh.len()
                )));
            }
            for (&i, v) in missing.iter().zip(fresh) {
                let checked = self.check(v)?;
                self.cache.insert(&id, &texts[i], checked.values.clone());
                out[i] = Some(checked.values);
            }
        }
        out.into_iter()
            .map(|v| self.check(v.expect("filled above")))
            .collect()
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_texts(&[text.to_string()])?.remove(0))
    }

    /// Embeds `title + "\n" + body`.
    pub fn embed_question(&self, record: &QaRecord) -> Result<EmbeddingVector> {
        self.embed_text(&record.question_text())
    }

    /// One vector per record, with bounded concurrent backend calls. Failed
    /// batches are reported per id after the cache has been persisted.
    pub fn embed_corpus(&self, records: &[QaRecord]) -> Result<BTreeMap<String, EmbeddingVector>> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism)
            .build()
            .expect("thread pool");
        let chunks: Vec<&[QaRecord]> = records.chunks(self.batch_size).collect();
        let results: Vec<(usize, Result<Vec<EmbeddingVector>>)> = pool.install(|| {
            chunks
                .par_iter()
                .enumerate()
                .map(|(i, chunk)| {
                    let texts: Vec<String> = chunk.iter().map(QaRecord::question_text).collect();
                    (i, self.embed_texts(&texts))
                })
                .collect()
        });
        let mut map = BTreeMap::new();
        let mut failed = Vec::new();
        for (i, res) in results {
            match res {
                Ok(vectors) => {
                    for (rec, v) in chunks[i].iter().zip(vectors) {
                        map.insert(rec.question_id.clone(), v);
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    failed.extend(chunks[i].iter().map(|r| (r.question_id.clone(), msg.clone())));
                }
            }
        }
        self.cache.persist()?;
        if failed.is_empty() {
            Ok(map)
        } else {
            failed.sort();
            Err(EmbeddingError::Partial { failed })
        }
    }
}
