//! Blockwise 4-bit NormalFloat quantization with optional 8-bit
//! quantization of the block scales.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "RSNF4\0\0\0"
//! version      u32
//! rows, cols   u64, u64
//! block_size   u32
//! scale_kind   u8       0 = exact f32 scales, 1 = double quantized
//! group_size   u32      0 for exact scales
//! scales       exact: n_blocks x f32
//!              double: n_groups x f32 (level 1), then n_blocks x u8 (level 2)
//! codes        ceil(rows*cols / 2) bytes, element 2i in the low nibble
//! checksum     sha256 of all preceding bytes
//! ```

use sha2::{Digest, Sha256};

use super::{DenseMatrix, QloraError};
use crate::exec::{self, Exec};

/// The 16 NF4 levels (normal-distribution quantiles scaled to [-1, 1]).
#[allow(clippy::excessive_precision)]
pub const NF4_CODEBOOK: [f32; 16] = [
    -1.0,
    -0.696_192_800_998_687_7,
    -0.525_073_051_452_636_7,
    -0.394_917_488_098_144_53,
    -0.284_441_381_692_886_35,
    -0.184_773_430_228_233_34,
    -0.091_050_036_251_544_95,
    0.0,
    0.079_580_299_556_255_34,
    0.160_930_201_411_247_25,
    0.246_112_301_945_686_34,
    0.337_915_241_718_292_24,
    0.440_709_829_330_444_34,
    0.562_617_003_917_694_1,
    0.722_956_836_223_602_3,
    1.0,
];

pub const ZERO_CODE: u8 = 7;
pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_SCALE_GROUP: usize = 256;

const MAGIC: &[u8; 8] = b"RSNF4\0\0\0";
const VERSION: u32 = 1;

/// Largest distance between neighbouring codebook levels.
pub fn max_level_gap() -> f64 {
    NF4_CODEBOOK.windows(2).map(|w| (w[1] - w[0]) as f64).fold(0.0, f64::max)
}

/// Index of the codebook level closest to `x` (first one on ties).
pub fn nearest_code(x: f64) -> u8 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &l) in NF4_CODEBOOK.iter().enumerate() {
        let d = (x - l as f64).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// Block scales kept as f32.
    Exact,
    /// Block scales stored as u8 relative to a per-group f32 maximum.
    Double { group_size: usize },
}

impl Default for ScaleMode {
    fn default() -> Self {
        ScaleMode::Double { group_size: DEFAULT_SCALE_GROUP }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockScales {
    Exact(Vec<f32>),
    Double { group_size: usize, level1: Vec<f32>, level2: Vec<u8> },
}

impl BlockScales {
    pub fn len(&self) -> usize {
        match self {
            BlockScales::Exact(s) => s.len(),
            BlockScales::Double { level2, .. } => level2.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reconstructed scale of block `b`.
    pub fn scale(&self, b: usize) -> f64 {
        match self {
            BlockScales::Exact(s) => s[b] as f64,
            BlockScales::Double { group_size, level1, level2 } => {
                level2[b] as f64 / 255.0 * level1[b / group_size] as f64
            }
        }
    }

    /// Worst-case absolute error of any reconstructed scale.
    pub fn scale_error_bound(&self) -> f64 {
        match self {
            BlockScales::Exact(_) => 0.0,
            BlockScales::Double { level1, .. } => level1.iter().fold(0.0f64, |m, &s| m.max(s as f64)) / 510.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Quantized {
    rows: usize,
    cols: usize,
    block_size: usize,
    /// Two codes per byte, element `2i` in the low nibble.
    packed: Vec<u8>,
    scales: BlockScales,
}

impl Nf4Quantized {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_count(&self) -> usize {
        self.len().div_ceil(self.block_size)
    }

    pub fn scales(&self) -> &BlockScales {
        &self.scales
    }

    pub fn code(&self, i: usize) -> u8 {
        let b = self.packed[i / 2];
        if i.is_multiple_of(2) {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u64).to_le_bytes());
        buf.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        match &self.scales {
            BlockScales::Exact(s) => {
                buf.push(0);
                buf.extend_from_slice(&0u32.to_le_bytes());
                s.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            }
            BlockScales::Double { group_size, level1, level2 } => {
                buf.push(1);
                buf.extend_from_slice(&(*group_size as u32).to_le_bytes());
                level1.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                buf.extend_from_slice(level2);
            }
        }
        buf.extend_from_slice(&self.packed);
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, QloraError> {
        let bad = |offset: usize, reason: &str| QloraError::Container { offset, reason: reason.into() };
        const HEADER: usize = 8 + 4 + 8 + 8 + 4 + 1 + 4;
        if bytes.len() < HEADER + 32 {
            return Err(bad(bytes.len(), "shorter than header and checksum"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad(0, "bad magic"));
        }
        let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
        let u64_at = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()) as usize;
        if u32_at(8) as u32 != VERSION {
            return Err(bad(8, "unsupported version"));
        }
        let (rows, cols, block_size) = (u64_at(12), u64_at(20), u32_at(28));
        if rows == 0 || cols == 0 || block_size < 2 {
            return Err(bad(12, "invalid shape or block size"));
        }
        let kind = bytes[32];
        let group_size = u32_at(33);
        let body_end = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(bad(body_end, "checksum mismatch"));
        }
        let n = rows.checked_mul(cols).ok_or_else(|| bad(12, "shape overflows"))?;
        let n_blocks = n.div_ceil(block_size);
        let mut pos = HEADER;
        let f32s = |pos: usize, count: usize| -> Vec<f32> {
            bytes[pos..pos + count * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let need = |pos: usize, len: usize| if pos + len > body_end { Err(bad(pos, "truncated")) } else { Ok(()) };
        let scales = match kind {
            0 => {
                need(pos, n_blocks * 4)?;
                let s = f32s(pos, n_blocks);
                pos += n_blocks * 4;
                BlockScales::Exact(s)
            }
            1 => {
                if group_size == 0 {
                    return Err(bad(33, "zero scale group size"));
                }
                let n_groups = n_blocks.div_ceil(group_size);
                need(pos, n_groups * 4 + n_blocks)?;
                let level1 = f32s(pos, n_groups);
                pos += n_groups * 4;
                let level2 = bytes[pos..pos + n_blocks].to_vec();
                pos += n_blocks;
                BlockScales::Double { group_size, level1, level2 }
            }
            _ => return Err(bad(32, "unknown scale kind")),
        };
        let n_packed = n.div_ceil(2);
        need(pos, n_packed)?;
        let packed = bytes[pos..pos + n_packed].to_vec();
        pos += n_packed;
        if pos != body_end {
            return Err(bad(pos, "trailing bytes before checksum"));
        }
        Ok(Nf4Quantized { rows, cols, block_size, packed, scales })
    }
}

/// Quantizes `w` in row-major blocks of `block_size` elements.
pub fn nf4_quantize(
    w: &DenseMatrix,
    block_size: usize,
    mode: ScaleMode,
    exec: Exec,
) -> Result<Nf4Quantized, QloraError> {
    if block_size < 2 {
        return Err(QloraError::BlockSize(block_size));
    }
    if let ScaleMode::Double { group_size: 0 } = mode {
        return Err(QloraError::GroupSize(0));
    }
    if let Some(i) = w.data().iter().position(|x| !x.is_finite()) {
        return Err(QloraError::NonFinite { index: i });
    }
    let data = w.data();
    let n_blocks = data.len().div_ceil(block_size);
    let blocks: Vec<(f32, Vec<u8>)> = exec::map_range(exec, n_blocks, |b| {
        let block = &data[b * block_size..((b + 1) * block_size).min(data.len())];
        let absmax = block.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if absmax == 0.0 {
            return (0.0, vec![ZERO_CODE; block.len()]);
        }
        (absmax as f32, block.iter().map(|x| nearest_code(x / absmax)).collect())
    });

    let mut packed = vec![0u8; data.len().div_ceil(2)];
    let mut exact = Vec::with_capacity(n_blocks);
    let mut i = 0;
    for (scale, codes) in blocks {
        exact.push(scale);
        for c in codes {
            packed[i / 2] |= if i % 2 == 0 { c } else { c << 4 };
            i += 1;
        }
    }
    let scales = match mode {
        ScaleMode::Exact => BlockScales::Exact(exact),
        ScaleMode::Double { group_size } => {
            let level1: Vec<f32> = exact.chunks(group_size).map(|g| g.iter().fold(0.0f32, |m, &s| m.max(s))).collect();
            let level2 = exact
                .iter()
                .enumerate()
                .map(|(b, &s)| {
                    let s1 = level1[b / group_size];
                    if s1 == 0.0 {
                        0
                    } else {
                        (s as f64 / s1 as f64 * 255.0).round().clamp(0.0, 255.0) as u8
                    }
                })
                .collect();
            BlockScales::Double { group_size, level1, level2 }
        }
    };
    let (rows, cols) = w.shape();
    Ok(Nf4Quantized { rows, cols, block_size, packed, scales })
}

/// Reconstructs the full-precision matrix: `codebook[code] * scale(block)`.
pub fn nf4_dequantize(q: &Nf4Quantized, exec: Exec) -> DenseMatrix {
    let n = q.len();
    let mut out = vec![0.0f64; n];
    exec::for_each_chunk_mut(exec, &mut out, q.block_size, |b, block| {
        let scale = q.scales.scale(b);
        for (j, o) in block.iter_mut().enumerate() {
            *o = NF4_CODEBOOK[q.code(b * q.block_size + j) as usize] as f64 * scale;
        }
    });
    DenseMatrix::new(q.rows, q.cols, out).expect("dequantized values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_is_sorted_symmetric_ish() {
        assert!(NF4_CODEBOOK.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(NF4_CODEBOOK[ZERO_CODE as usize], 0.0);
        assert_eq!((NF4_CODEBOOK[0], NF4_CODEBOOK[15]), (-1.0, 1.0));
        assert!((max_level_gap() - 0.303_807).abs() < 1e-5);
    }

    #[test]
    fn nearest_code_hits_levels() {
        for (i, &l) in NF4_CODEBOOK.iter().enumerate() {
            assert_eq!(nearest_code(l as f64), i as u8);
        }
        assert_eq!(nearest_code(0.01), ZERO_CODE);
    }

    #[test]
    fn partial_last_block_and_odd_length() {
        let w = DenseMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let q = nf4_quantize(&w, 4, ScaleMode::Exact, Exec::Sequential).unwrap();
        assert_eq!(q.block_count(), 3);
        let back = Nf4Quantized::decode(&q.encode()).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn container_rejects_corruption() {
        let w = DenseMatrix::from_fn(4, 4, |i, j| (i + j) as f64);
        let q = nf4_quantize(&w, 8, ScaleMode::default(), Exec::Sequential).unwrap();
        let mut bytes = q.encode();
        bytes[40] ^= 1;
        assert!(matches!(Nf4Quantized::decode(&bytes), Err(QloraError::Container { .. })));
    }
}
