//! Semantic query vectors.
//!
//! An [`Embedder`] turns SQL texts into fixed-size vectors. The built-in
//! embedder hashes each whitespace token to a deterministic unit vector and
//! pools the token vectors per query. Queries are processed in chunks of
//! `batch_size`; inside a chunk every token sequence is padded to the longest
//! one and the padding is masked out of the pooling.
//!
//! [`EmbeddingStore`] caches vectors by the hash of the exact SQL text so each
//! distinct text is embedded once.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv::{self, Fnv1a64};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_BATCH_SIZE: usize = 512;
pub const STORE_FILE: &str = "embeddings.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

impl Pooling {
    /// Value written into padded token rows.
    pub fn pad_value(self) -> f64 {
        match self {
            // stands in for negative infinity without producing NaNs
            Pooling::Max => f64::MIN,
            Pooling::Mean => 0.0,
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!(
                "unknown pooling {other:?}, expected max or mean"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            batch_size: DEFAULT_BATCH_SIZE,
            pooling: Pooling::Max,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row-major `rows x dim` matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = Vec<f32>>) -> Result<Self> {
        let mut m = Self::new(dim);
        for row in rows {
            m.push_row(&row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(sql_text: &str) -> Vec<String> {
    sql_text.split_whitespace().map(str::to_lowercase).collect()
}

/// Deterministic unit vector for a token.
pub fn token_vector(token: &str, config: &EmbeddingConfig) -> Vec<f64> {
    let mut h = Fnv1a64::new();
    h.write(&config.seed.to_le_bytes());
    h.write(token.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let mut v: Vec<f64> = (0..config.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

/// Padded token vectors of one query.
#[derive(Debug, Clone)]
pub struct TokenMatrix {
    pub rows: Vec<Vec<f64>>,
    pub valid_len: usize,
}

impl TokenMatrix {
    fn padded(mut rows: Vec<Vec<f64>>, len: usize, dim: usize, pooling: Pooling) -> Self {
        let valid_len = rows.len();
        rows.resize(len, vec![pooling.pad_value(); dim]);
        Self { rows, valid_len }
    }

    /// Pool along the token axis. Padding is neutral by construction: it can
    /// never win a max, adds nothing to a sum, and the mean divides by
    /// `valid_len`.
    pub fn pool(&self, pooling: Pooling, dim: usize) -> Vec<f64> {
        let mut acc = vec![pooling.pad_value(); dim];
        for row in &self.rows {
            for (a, &x) in acc.iter_mut().zip(row) {
                match pooling {
                    Pooling::Max => *a = a.max(x),
                    Pooling::Mean => *a += x,
                }
            }
        }
        if pooling == Pooling::Mean {
            let n = self.valid_len as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        acc
    }
}

/// Embed queries with the built-in token embedder.
pub fn embed_batch(queries: &[&str], config: &EmbeddingConfig) -> Result<Matrix> {
    config.validate()?;
    let mut out = Matrix::new(config.dim);
    let mut vocab: HashMap<String, Vec<f64>> = HashMap::new();
    for (chunk_idx, chunk) in queries.chunks(config.batch_size).enumerate() {
        let token_lists: Vec<Vec<String>> = chunk.iter().map(|q| tokenize(q)).collect();
        if let Some(pos) = token_lists.iter().position(Vec::is_empty) {
            return Err(Error::EmptyQuery(chunk_idx * config.batch_size + pos));
        }
        let longest = token_lists.iter().map(Vec::len).max().unwrap_or(0);
        for tokens in token_lists {
            let rows = tokens
                .iter()
                .map(|t| {
                    vocab
                        .entry(t.clone())
                        .or_insert_with(|| token_vector(t, config))
                        .clone()
                })
                .collect();
            let matrix = TokenMatrix::padded(rows, longest, config.dim, config.pooling);
            let pooled: Vec<f32> = matrix
                .pool(config.pooling, config.dim)
                .into_iter()
                .map(|x| x as f32)
                .collect();
            out.push_row(&pooled)?;
        }
    }
    Ok(out)
}

/// Something that maps SQL texts to vectors, row `i` for query `i`.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, queries: &[&str]) -> Result<Matrix>;
}

#[derive(Debug, Clone, Default)]
pub struct BuiltinEmbedder {
    pub config: EmbeddingConfig,
}

impl BuiltinEmbedder {
    pub fn new(config: EmbeddingConfig) -> Self {
        Self { config }
    }
}

impl Embedder for BuiltinEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, queries: &[&str]) -> Result<Matrix> {
        embed_batch(queries, &self.config)
    }
}

/// Wraps an embedder and counts how many queries it was asked to embed.
#[derive(Debug, Default)]
pub struct Counting<E> {
    inner: E,
    queries: AtomicUsize,
    calls: AtomicUsize,
}

impl<E> Counting<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            queries: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn queries_embedded(&self) -> usize {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<E: Embedder> Embedder for Counting<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, queries: &[&str]) -> Result<Matrix> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.queries.fetch_add(queries.len(), Ordering::SeqCst);
        self.inner.embed(queries)
    }
}

const STORE_MAGIC: &[u8; 4] = b"AWME";
const STORE_VERSION: u8 = 1;
const STORE_HEADER: usize = 4 + 1 + 4 + 8;

/// Cache key of a raw SQL text.
pub fn cache_key(sql_text: &str) -> u64 {
    fnv::hash(sql_text.as_bytes())
}

/// Content-addressed vector cache. Lookups may run concurrently; the first
/// value inserted for a key is kept.
#[derive(Debug)]
pub struct EmbeddingStore {
    dim: usize,
    path: Option<PathBuf>,
    entries: RwLock<HashMap<u64, Vec<f32>>>,
}

impl EmbeddingStore {
    pub fn in_memory(dim: usize) -> Self {
        Self {
            dim,
            path: None,
            entries: RwLock::new(HashMap::new()),
        }
    }

    /// Open the store file in `dir`, or start empty if it does not exist.
    pub fn open(dir: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| Error::StoreUnavailable {
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join(STORE_FILE);
        let entries = match fs::read(&path) {
            Ok(bytes) => {
                let (file_dim, entries) = decode_store(&bytes, &path)?;
                if file_dim != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: file_dim,
                    });
                }
                entries
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => HashMap::new(),
            Err(source) => {
                return Err(Error::StoreUnavailable {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        Ok(Self {
            dim,
            path: Some(path),
            entries: RwLock::new(entries),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries
            .read()
            .expect("embedding store lock poisoned")
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, sql_text: &str) -> Option<Vec<f32>> {
        self.get_key(cache_key(sql_text))
    }

    fn get_key(&self, key: u64) -> Option<Vec<f32>> {
        self.entries
            .read()
            .expect("embedding store lock poisoned")
            .get(&key)
            .cloned()
    }

    /// Insert unless present. Returns whether this call stored the value.
    pub fn insert(&self, sql_text: &str, vector: Vec<f32>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        let mut entries = self.entries.write().expect("embedding store lock poisoned");
        let key = cache_key(sql_text);
        if entries.contains_key(&key) {
            return Ok(false);
        }
        entries.insert(key, vector);
        Ok(true)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries.read().expect("embedding store lock poisoned");
        let mut keys: Vec<&u64> = entries.keys().collect();
        keys.sort_unstable();
        let mut out = Vec::with_capacity(STORE_HEADER + keys.len() * (8 + 4 * self.dim) + 8);
        out.extend_from_slice(STORE_MAGIC);
        out.push(STORE_VERSION);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(keys.len() as u64).to_le_bytes());
        for key in keys {
            out.extend_from_slice(&key.to_le_bytes());
            for x in &entries[key] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let checksum = fnv::hash(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    /// Write the store file atomically. No-op for in-memory stores.
    pub fn persist(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let tmp = path.with_extension("bin.tmp");
        let io = |source| Error::StoreUnavailable {
            path: path.display().to_string(),
            source,
        };
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }
}

fn decode_store(bytes: &[u8], path: &Path) -> Result<(usize, HashMap<u64, Vec<f32>>)> {
    let corrupt = |why: &str| Error::CorruptState(format!("{}: {why}", path.display()));
    if bytes.len() < STORE_HEADER + 8 || &bytes[..4] != STORE_MAGIC {
        return Err(corrupt("bad header"));
    }
    if bytes[4] > STORE_VERSION {
        return Err(Error::VersionMismatch {
            found: u32::from(bytes[4]),
            supported: u32::from(STORE_VERSION),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv::hash(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let dim = u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(body[9..17].try_into().expect("8 bytes")) as usize;
    let entry = 8 + 4 * dim;
    if body.len() != STORE_HEADER + count * entry {
        return Err(corrupt("length does not match entry count"));
    }
    let entries = body[STORE_HEADER..]
        .chunks_exact(entry)
        .map(|chunk| {
            let key = u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
            let v = chunk[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            (key, v)
        })
        .collect();
    Ok((dim, entries))
}

/// Embed through the cache: only texts missing from the store reach the
/// embedder (each distinct text once), and every output row is read back
/// from the store so repeated calls are bitwise identical.
pub fn embed_with_store(
    queries: &[&str],
    store: &EmbeddingStore,
    embedder: &dyn Embedder,
) -> Result<Matrix> {
    if embedder.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: embedder.dim(),
        });
    }
    if let Some(pos) = queries.iter().position(|q| q.trim().is_empty()) {
        return Err(Error::EmptyQuery(pos));
    }
    let keys: Vec<u64> = queries.iter().map(|q| cache_key(q)).collect();
    let mut pending: Vec<&str> = Vec::new();
    let mut pending_keys: Vec<u64> = Vec::new();
    for (&q, &key) in queries.iter().zip(&keys) {
        if !pending_keys.contains(&key) && store.get_key(key).is_none() {
            pending.push(q);
            pending_keys.push(key);
        }
    }
    if !pending.is_empty() {
        let fresh = embedder.embed(&pending)?;
        if fresh.len() != pending.len() {
            return Err(Error::Embedder(format!(
                "asked for {} vectors, received {}",
                pending.len(),
                fresh.len()
            )));
        }
        for (q, row) in pending.iter().zip(fresh.rows()) {
            store.insert(q, row.to_vec())?;
        }
    }
    let mut out = Matrix::new(store.dim());
    for key in keys {
        let row = store.get_key(key).expect("inserted above");
        out.push_row(&row)?;
    }
    Ok(out)
}
