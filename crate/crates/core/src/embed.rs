//! Image embeddings: providers, the content-hash cache and the `EMBV1` file
//! format.
//!
//! ```text
//! "EMBV1"  u32 n  u32 d  u8 normalized  n*d f32     (little endian)
//! ```
//!
//! Row metadata lives in a sidecar `<file>.manifest.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{join_url, parallel_map, BackendError, HttpClient, RetryPolicy};
use crate::corpus::StyleLabel;
use crate::mock;
use crate::rng::{hash64, SplitRng};

pub const MAGIC: &[u8; 5] = b"EMBV1";
const HEADER_LEN: usize = 5 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("truncated embedding file: need {need} bytes at offset {offset}, have {have}")]
    Truncated { offset: usize, need: usize, have: usize },
    #[error("trailing bytes after offset {0}")]
    Trailing(usize),
    #[error("provider returned dimension {got}, expected {want}")]
    DimMismatch { want: usize, got: usize },
    #[error("embedding of {0} has zero norm")]
    ZeroNorm(String),
    #[error("embedding of {0} has non-finite entries")]
    NonFinite(String),
    #[error("cannot read image {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture has no embedding for {0}")]
    NotInFixture(String),
    #[error("manifest has {manifest} rows but matrix has {rows}")]
    ManifestLength { manifest: usize, rows: usize },
    #[error("mock provider needs d >= {min}, got {got}")]
    MockDim { min: usize, got: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: String,
    pub label: StyleLabel,
    pub origin: Origin,
}

/// Row-major `n x d` float32 matrix with per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
    pub normalized: bool,
    pub manifest: Vec<RowMeta>,
}

impl EmbeddingMatrix {
    pub fn empty(d: usize) -> Self {
        Self {
            n: 0,
            d,
            data: Vec::new(),
            normalized: false,
            manifest: Vec::new(),
        }
    }

    pub fn from_rows(d: usize, rows: Vec<Vec<f32>>, manifest: Vec<RowMeta>, normalized: bool) -> Result<Self, EmbedError> {
        if rows.len() != manifest.len() {
            return Err(EmbedError::ManifestLength {
                manifest: manifest.len(),
                rows: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in &rows {
            if r.len() != d {
                return Err(EmbedError::DimMismatch { want: d, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            n: rows.len(),
            d,
            data,
            normalized,
            manifest,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.d.max(1)).take(self.n)
    }

    pub fn labels(&self) -> Vec<StyleLabel> {
        self.manifest.iter().map(|m| m.label).collect()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        let mut manifest = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            manifest.push(self.manifest[i].clone());
        }
        Self {
            n: indices.len(),
            d: self.d,
            data,
            normalized: self.normalized,
            manifest,
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&RowMeta) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.n).filter(|&i| keep(&self.manifest[i])).collect();
        self.select(&idx)
    }

    pub fn with_label(&self, label: StyleLabel) -> Self {
        self.filter(|m| m.label == label)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.push(self.normalized as u8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary part; the manifest is left empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let need = |offset: usize, len: usize| {
            if bytes.len() < offset + len {
                Err(EmbedError::Truncated {
                    offset,
                    need: len,
                    have: bytes.len().saturating_sub(offset),
                })
            } else {
                Ok(&bytes[offset..offset + len])
            }
        };
        if bytes.len() < MAGIC.len() {
            if MAGIC.starts_with(bytes) {
                need(0, MAGIC.len())?;
            }
            return Err(EmbedError::BadMagic);
        }
        if &bytes[..5] != MAGIC {
            return Err(EmbedError::BadMagic);
        }
        let n = u32::from_le_bytes(need(5, 4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(need(9, 4)?.try_into().unwrap()) as usize;
        let normalized = need(13, 1)?[0] != 0;
        let body_len = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or(EmbedError::Truncated {
                offset: HEADER_LEN,
                need: usize::MAX,
                have: bytes.len() - HEADER_LEN,
            })?;
        let body = need(HEADER_LEN, body_len)?;
        if bytes.len() > HEADER_LEN + body_len {
            return Err(EmbedError::Trailing(HEADER_LEN + body_len));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n,
            d,
            data,
            normalized,
            manifest: Vec::new(),
        })
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Writes the matrix and its sidecar manifest.
pub fn persist_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbedError> {
    if m.manifest.len() != m.n {
        return Err(EmbedError::ManifestLength {
            manifest: m.manifest.len(),
            rows: m.n,
        });
    }
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| EmbedError::Io { path: p, source }
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, m.to_bytes()).map_err(io(path))?;
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(&m.manifest).expect("manifest serialises");
    fs::write(&mp, json).map_err(io(&mp))
}

/// Reads a matrix and, when present, its sidecar manifest.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let bytes = fs::read(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut m = EmbeddingMatrix::from_bytes(&bytes)?;
    let mp = manifest_path(path);
    if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(|source| EmbedError::Io {
            path: mp.clone(),
            source,
        })?;
        m.manifest = serde_json::from_str(&text).map_err(|source| EmbedError::Json { path: mp, source })?;
        if m.manifest.len() != m.n {
            return Err(EmbedError::ManifestLength {
                manifest: m.manifest.len(),
                rows: m.n,
            });
        }
    }
    Ok(m)
}

/// Maps image bytes to a fixed-dimension vector.
pub trait EmbedProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, id: &str, bytes: &[u8]) -> Result<Vec<f32>, EmbedError>;
}

/// Per-style orthogonal means plus seeded Gaussian noise.
///
/// The style comes from the mock PNG metadata chunk; otherwise the file name
/// is hashed onto one of the remaining basis directions.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub dim: usize,
    pub sigma: f64,
}

impl MockProvider {
    pub fn new(dim: usize, sigma: f64) -> Result<Self, EmbedError> {
        if dim < StyleLabel::ALL.len() {
            return Err(EmbedError::MockDim {
                min: StyleLabel::ALL.len(),
                got: dim,
            });
        }
        Ok(Self { dim, sigma })
    }

    pub fn basis_index(&self, id: &str, bytes: &[u8]) -> usize {
        match mock::read_style(bytes) {
            Some(s) => s.ordinal(),
            None => {
                let spare = self.dim - StyleLabel::ALL.len();
                let h = hash64(id.as_bytes()) as usize;
                if spare == 0 {
                    h % self.dim
                } else {
                    StyleLabel::ALL.len() + h % spare
                }
            }
        }
    }
}

impl EmbedProvider for MockProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, id: &str, bytes: &[u8]) -> Result<Vec<f32>, EmbedError> {
        let mut rng = SplitRng::new(hash64(bytes));
        let mut v: Vec<f32> = (0..self.dim)
            .map(|_| (self.sigma * rng.standard_normal()) as f32)
            .collect();
        v[self.basis_index(id, bytes)] += 1.0;
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

/// Provider metadata served at `GET /info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub model: String,
    pub dim: usize,
}

/// Client for an embedding server: `POST {endpoint}/embed` with raw image
/// bytes, `{"embedding": [...]}` back.
pub struct HttpProvider {
    endpoint: String,
    dim: usize,
    http: HttpClient,
}

impl HttpProvider {
    pub fn new(endpoint: &str, dim: usize, retry: RetryPolicy, timeout: Duration) -> Result<Self, EmbedError> {
        Ok(Self {
            endpoint: endpoint.to_string(),
            dim,
            http: HttpClient::new(retry, None, timeout)?,
        })
    }

    pub fn info(&self) -> Result<ProviderInfo, EmbedError> {
        let body = self.http.get(&join_url(&self.endpoint, "info"))?;
        serde_json::from_slice(&body).map_err(|e| BackendError::Decode(e.to_string()).into())
    }
}

impl EmbedProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _id: &str, bytes: &[u8]) -> Result<Vec<f32>, EmbedError> {
        let body = self
            .http
            .post_bytes(&join_url(&self.endpoint, "embed"), bytes, "application/octet-stream")?;
        let resp: EmbedResponse = serde_json::from_slice(&body).map_err(|e| BackendError::Decode(e.to_string()))?;
        Ok(resp.embedding)
    }
}

/// Looks rows up by image id in a pre-built matrix.
pub struct FixtureProvider {
    d: usize,
    rows: HashMap<String, Vec<f32>>,
}

impl FixtureProvider {
    pub fn new(m: &EmbeddingMatrix) -> Self {
        let rows = m
            .manifest
            .iter()
            .enumerate()
            .map(|(i, meta)| (meta.id.clone(), m.row(i).to_vec()))
            .collect();
        Self { d: m.d, rows }
    }

    pub fn from_file(path: &Path) -> Result<Self, EmbedError> {
        Ok(Self::new(&load_embeddings(path)?))
    }
}

impl EmbedProvider for FixtureProvider {
    fn dim(&self) -> usize {
        self.d
    }

    fn embed(&self, id: &str, _bytes: &[u8]) -> Result<Vec<f32>, EmbedError> {
        self.rows
            .get(id)
            .cloned()
            .ok_or_else(|| EmbedError::NotInFixture(id.to_string()))
    }
}

/// Memoises a provider by (id, content) hash.
pub struct CachedProvider<P> {
    inner: P,
    cache: RwLock<HashMap<u64, Vec<f32>>>,
}

impl<P: EmbedProvider> CachedProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

impl<P: EmbedProvider> EmbedProvider for CachedProvider<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, id: &str, bytes: &[u8]) -> Result<Vec<f32>, EmbedError> {
        // fixture lookups depend on the id, everything else on content only
        let mut key = bytes.to_vec();
        key.extend_from_slice(id.as_bytes());
        let key = hash64(&key);
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(id, bytes)?;
        self.cache.write().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }
}

impl EmbedProvider for Box<dyn EmbedProvider> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed(&self, id: &str, bytes: &[u8]) -> Result<Vec<f32>, EmbedError> {
        (**self).embed(id, bytes)
    }
}

pub fn l2_normalize(v: &mut [f32], id: &str) -> Result<(), EmbedError> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(EmbedError::NonFinite(id.to_string()));
    }
    if norm == 0.0 {
        return Err(EmbedError::ZeroNorm(id.to_string()));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

/// An image to embed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedItem {
    pub meta: RowMeta,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedOptions {
    pub normalize: bool,
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            max_in_flight: 4,
        }
    }
}

fn embed_one(provider: &dyn EmbedProvider, item: &EmbedItem, d: usize, normalize: bool) -> Result<Vec<f32>, EmbedError> {
    let bytes = fs::read(&item.path).map_err(|source| EmbedError::Unreadable {
        path: item.path.clone(),
        source,
    })?;
    let mut v = provider.embed(&item.meta.id, &bytes)?;
    if v.len() != d {
        return Err(EmbedError::DimMismatch { want: d, got: v.len() });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite(item.meta.id.clone()));
    }
    if normalize {
        l2_normalize(&mut v, &item.meta.id)?;
    }
    Ok(v)
}

/// Embeds `items` in order. The first failure stops further requests.
pub fn embed_images(provider: &dyn EmbedProvider, items: &[EmbedItem], opts: &EmbedOptions) -> Result<EmbeddingMatrix, EmbedError> {
    let d = provider.dim();
    let abort = AtomicBool::new(false);
    let rows = parallel_map(items, opts.max_in_flight, |item| {
        if abort.load(Ordering::Relaxed) {
            return None;
        }
        let r = embed_one(provider, item, d, opts.normalize);
        if r.is_err() {
            abort.store(true, Ordering::Relaxed);
        }
        Some(r)
    });
    if let Some(e) = rows.iter().position(|r| matches!(r, Some(Err(_)))) {
        return Err(rows.into_iter().nth(e).flatten().and_then(Result::err).expect("error present"));
    }
    let rows = rows.into_iter().map(|r| r.expect("no abort without an error").expect("checked")).collect();
    EmbeddingMatrix::from_rows(d, rows, items.iter().map(|i| i.meta.clone()).collect(), opts.normalize)
}
