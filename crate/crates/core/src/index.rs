//! Exact flat inner-product index over unit vectors.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "RSVIDX\0\0" | version u32 | dim u32 | count u64
//! count × ( ref_len u32 | ref utf-8 bytes | dim × f32 )
//! sha256 of all preceding bytes (32 bytes)
//! ```

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{Chunk, ChunkRef};
use crate::exec::{self, Exec};
use crate::llm::{LlmClient, LlmError};

const MAGIC: &[u8; 8] = b"RSVIDX\0\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("vector has dimension {got}, index dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector for {chunk_ref} has norm {norm}, expected 1 ± 1e-6")]
    NotUnit { chunk_ref: ChunkRef, norm: f64 },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot build an index from zero chunks")]
    Empty,
    #[error("embedding failed for chunk {chunk_ref}: {source}")]
    Embedding { chunk_ref: ChunkRef, source: LlmError },
    #[error("index file corrupt at byte offset {offset}: {reason}")]
    Integrity { offset: usize, reason: String },
    #[error("index file declares dimension {found}, expected {expected}")]
    DimensionHeader { expected: usize, found: usize },
    #[error("index I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub chunk_ref: ChunkRef,
    /// Insertion position; the tie-breaker for equal scores.
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexStats {
    pub dim: usize,
    pub count: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    refs: Vec<ChunkRef>,
    data: Vec<f32>,
}

/// Inner product accumulated in f64, in component order.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Ranking order: higher score first, then earlier insertion.
pub fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "index dimension must be positive");
        VectorIndex { dim, refs: Vec::new(), data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn refs(&self) -> &[ChunkRef] {
        &self.refs
    }

    pub fn vector(&self, position: usize) -> &[f32] {
        &self.data[position * self.dim..(position + 1) * self.dim]
    }

    pub fn insert(&mut self, chunk_ref: ChunkRef, vector: &[f32]) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, got: vector.len() });
        }
        let norm = dot(vector, vector).sqrt();
        if norm.is_nan() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NotUnit { chunk_ref, norm });
        }
        self.refs.push(chunk_ref);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    /// Top `min(k, len)` entries by inner product with `query`.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, IndexError> {
        self.search_with(query, k, Exec::default())
    }

    pub fn search_with(&self, query: &[f32], k: usize, exec: Exec) -> Result<Vec<Hit>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let mut scored: Vec<(f64, usize)> = exec::map_range(exec, self.len(), |i| (dot(self.vector(i), query), i));
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
            scored.truncate(k);
        }
        scored.sort_unstable_by(|a, b| rank_order(*a, *b));
        Ok(scored
            .into_iter()
            .map(|(score, position)| Hit { chunk_ref: self.refs[position].clone(), position, score })
            .collect())
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + self.refs.len() * 40 + 32);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, r) in self.refs.iter().enumerate() {
            buf.extend_from_slice(&(r.0.len() as u32).to_le_bytes());
            buf.extend_from_slice(r.0.as_bytes());
            for x in self.vector(i) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IndexError> {
        let corrupt = |offset: usize, reason: &str| IndexError::Integrity { offset, reason: reason.to_string() };
        if bytes.len() < HEADER_LEN + 32 {
            return Err(corrupt(bytes.len(), "file shorter than header and checksum"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(8, &format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(corrupt(12, "dimension is zero"));
        }
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body_end = bytes.len() - 32;

        let mut index = VectorIndex::new(dim);
        let mut pos = HEADER_LEN;
        for _ in 0..count {
            if pos + 4 > body_end {
                return Err(corrupt(pos, "truncated record header"));
            }
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + len + dim * 4 > body_end {
                return Err(corrupt(pos, "truncated record"));
            }
            let r = std::str::from_utf8(&bytes[pos..pos + len]).map_err(|_| corrupt(pos, "reference is not UTF-8"))?;
            let r = ChunkRef(r.to_string());
            pos += len;
            let vector: Vec<f32> =
                bytes[pos..pos + dim * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let at = pos;
            pos += dim * 4;
            index.insert(r, &vector).map_err(|e| corrupt(at, &e.to_string()))?;
        }
        if pos != body_end {
            return Err(corrupt(pos, "trailing bytes before checksum"));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(corrupt(body_end, "checksum mismatch"));
        }
        Ok(index)
    }

    pub fn stats(&self) -> IndexStats {
        let bytes = self.encode();
        IndexStats { dim: self.dim, count: self.len(), checksum: hex::encode(&bytes[bytes.len() - 32..]) }
    }

    /// Errors unless this index has dimension `expected`.
    pub fn expect_dim(&self, expected: usize) -> Result<(), IndexError> {
        if self.dim != expected {
            return Err(IndexError::DimensionHeader { expected, found: self.dim });
        }
        Ok(())
    }
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<(), IndexError> {
    let bytes = index.encode();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<VectorIndex, IndexError> {
    VectorIndex::decode(&fs::read(path)?)
}

/// Embeds every chunk (in batches of the client's `embed_batch_size`) and
/// inserts them in chunk order.
pub fn build_index(chunks: &[Chunk], client: &LlmClient, exec: Exec) -> Result<VectorIndex, IndexError> {
    if chunks.is_empty() {
        return Err(IndexError::Empty);
    }
    let batches: Vec<&[Chunk]> = chunks.chunks(client.config().embed_batch_size.max(1)).collect();
    let embedded = exec::map(exec, &batches, |batch| {
        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
        client.embed(&texts)
    });

    let mut index: Option<VectorIndex> = None;
    for (batch, result) in batches.iter().zip(embedded) {
        let emb = result.map_err(|source| IndexError::Embedding { chunk_ref: batch[0].chunk_ref(), source })?;
        for (chunk, v) in batch.iter().zip(&emb.vectors) {
            let idx = index.get_or_insert_with(|| VectorIndex::new(v.len()));
            idx.insert(chunk.chunk_ref(), v)?;
        }
        if !emb.truncated.is_empty() {
            log::warn!("{} chunk(s) truncated to the embedder's input budget", emb.truncated.len());
        }
    }
    index.ok_or(IndexError::Empty)
}
