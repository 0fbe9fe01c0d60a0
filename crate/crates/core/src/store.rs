//! Embedding storage: the `SQEMB1` binary format, the immutable gallery
//! index, and the vector primitives every other module builds on.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "SQEMB1" | version u16 | dim u32 | count u64 |
//! count × ( id_len u16 | id utf-8 | dim × f32 )
//! ```
//!
//! Vectors are kept exactly as exported. Normalization happens at the use
//! site, so a load/write cycle reproduces the input file byte for byte.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"SQEMB1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic header (expected \"SQEMB1\")")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("non-finite value in embedding {id:?} at component {component}")]
    NonFiniteValue { id: String, component: usize },
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("id {0:?} is not valid UTF-8")]
    InvalidId(String),
    #[error("id of {0} bytes exceeds the u16 length field")]
    IdTooLong(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A vector in the shared image/text embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps raw values, rejecting empty or non-finite input.
    pub fn new(values: Vec<f32>) -> Result<Self, StoreError> {
        if values.is_empty() {
            return Err(StoreError::ZeroDim);
        }
        if let Some(component) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                id: String::new(),
                component,
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    /// L2 norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn normalize(&self) -> Result<Embedding, StoreError> {
        normalize(self)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Returns `e / ‖e‖₂`.
pub fn normalize(e: &Embedding) -> Result<Embedding, StoreError> {
    let n = e.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(StoreError::ZeroVector);
    }
    Ok(Embedding(
        e.0.iter().map(|&x| (f64::from(x) / n) as f32).collect(),
    ))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, StoreError> {
    if a.dim() != b.dim() {
        return Err(StoreError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(StoreError::ZeroVector);
    }
    Ok(cosine_with_norms(a.as_slice(), b.as_slice(), na, nb))
}

/// Shared scoring kernel. Norms must be nonzero; the ranker precomputes them
/// with [`l2_norm`] so its scores are bit-identical to [`cosine`].
#[inline]
pub(crate) fn cosine_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Immutable id → embedding store in load order.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    norms: Vec<f64>,
    lookup: HashMap<String, usize>,
}

impl GalleryIndex {
    /// Builds an index from in-memory records, enforcing the same invariants
    /// as [`load_index`].
    pub fn from_records<I, S>(dim: usize, records: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (S, Embedding)>,
        S: Into<String>,
    {
        let mut builder = IndexBuilder::new(dim)?;
        for (id, e) in records {
            builder.push(id.into(), e)?;
        }
        Ok(builder.finish())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.lookup.get(id).map(|&i| &self.vectors[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lookup.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter())
    }

    pub(crate) fn entry(&self, pos: usize) -> (&str, &[f32], f64) {
        (&self.ids[pos], self.vectors[pos].as_slice(), self.norms[pos])
    }
}

struct IndexBuilder {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    norms: Vec<f64>,
    lookup: HashMap<String, usize>,
}

impl IndexBuilder {
    fn new(dim: usize) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
            lookup: HashMap::new(),
        })
    }

    fn with_capacity(dim: usize, count: usize) -> Result<Self, StoreError> {
        let mut b = Self::new(dim)?;
        // count comes from an untrusted header; cap the preallocation
        let cap = count.min(1 << 20);
        b.ids.reserve(cap);
        b.vectors.reserve(cap);
        b.norms.reserve(cap);
        b.lookup.reserve(cap);
        Ok(b)
    }

    fn push(&mut self, id: String, e: Embedding) -> Result<(), StoreError> {
        if e.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                actual: e.dim(),
            });
        }
        if let Some(component) = e.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue { id, component });
        }
        if id.len() > u16::MAX as usize {
            return Err(StoreError::IdTooLong(id.len()));
        }
        if self.lookup.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        self.lookup.insert(id.clone(), self.ids.len());
        self.norms.push(e.norm());
        self.ids.push(id);
        self.vectors.push(e);
        Ok(())
    }

    fn finish(self) -> GalleryIndex {
        GalleryIndex {
            dim: self.dim,
            ids: self.ids,
            vectors: self.vectors,
            norms: self.norms,
            lookup: self.lookup,
        }
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::TruncatedFile(what),
        _ => StoreError::Io(e),
    })
}

/// Reads an index from any byte stream in one pass.
pub fn read_index<R: Read>(mut r: R) -> Result<GalleryIndex, StoreError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::BadMagic,
        _ => StoreError::Io(e),
    })?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let mut b2 = [0u8; 2];
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b2, "header")?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    read_exact_or(&mut r, &mut b4, "header")?;
    let dim = u32::from_le_bytes(b4) as usize;
    read_exact_or(&mut r, &mut b8, "header")?;
    let count = u64::from_le_bytes(b8) as usize;

    let mut builder = IndexBuilder::with_capacity(dim, count)?;
    let mut raw = vec![0u8; dim * 4];
    for _ in 0..count {
        read_exact_or(&mut r, &mut b2, "record id length")?;
        let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact_or(&mut r, &mut id, "record id")?;
        let id = String::from_utf8(id)
            .map_err(|e| StoreError::InvalidId(String::from_utf8_lossy(e.as_bytes()).into_owned()))?;
        read_exact_or(&mut r, &mut raw, "record vector")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        builder.push(id, Embedding(values))?;
    }
    Ok(builder.finish())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<GalleryIndex, StoreError> {
    read_index(BufReader::new(File::open(path)?))
}

pub fn write_index_to<W: Write>(index: &GalleryIndex, mut w: W) -> Result<(), StoreError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(index.dim as u32).to_le_bytes())?;
    w.write_all(&(index.len() as u64).to_le_bytes())?;
    for (id, e) in index.iter() {
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for v in e.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_index(index: &GalleryIndex, path: impl AsRef<Path>) -> Result<(), StoreError> {
    write_index_to(index, BufWriter::new(File::create(path)?))
}
