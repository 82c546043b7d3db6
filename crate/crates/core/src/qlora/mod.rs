//! Forward algebra of quantized low-rank adaptation: NF4 block quantization,
//! the adapted dense layer and its quantized counterpart, plus sequence
//! packing for training batches. Full precision (`f64`) stands in for BF16.

mod matrix;
pub mod nf4;
mod pack;

pub use matrix::DenseMatrix;
pub use nf4::{nf4_dequantize, nf4_quantize, BlockScales, Nf4Quantized, ScaleMode, NF4_CODEBOOK};
pub use pack::{pack_sequences, packed_padding, unpacked_padding, Pack};

use crate::exec::Exec;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QloraError {
    #[error("matrix shape {rows}x{cols} has a zero dimension")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} values, got {got}")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("block size must be at least 2, got {0}")]
    BlockSize(usize),
    #[error("scale group size must be positive, got {0}")]
    GroupSize(usize),
    #[error("adapter rank {rank} exceeds min(m, n) = {limit}")]
    RankTooLarge { rank: usize, limit: usize },
    #[error("sequence {id:?} has length {len} > max_len {max_len}")]
    Oversize { id: String, len: usize, max_len: usize },
    #[error("max_len must be positive")]
    ZeroMaxLen,
    #[error("corrupt quantized container at byte {offset}: {reason}")]
    Container { offset: usize, reason: String },
}

/// Low-rank update `s * A B` with `A: m x r`, `B: r x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: DenseMatrix,
    b: DenseMatrix,
    s: f64,
}

impl LoraAdapter {
    pub fn new(a: DenseMatrix, b: DenseMatrix, s: f64) -> Result<Self, QloraError> {
        if a.cols() != b.rows() {
            return Err(QloraError::Shape { op: "adapter", left: a.shape(), right: b.shape() });
        }
        let limit = a.rows().min(b.cols());
        if a.cols() > limit {
            return Err(QloraError::RankTooLarge { rank: a.cols(), limit });
        }
        if !s.is_finite() {
            return Err(QloraError::NonFinite { index: 0 });
        }
        Ok(LoraAdapter { a, b, s })
    }

    /// Uses the `alpha / r` scaling convention.
    pub fn with_alpha(a: DenseMatrix, b: DenseMatrix, alpha: f64) -> Result<Self, QloraError> {
        let r = a.cols() as f64;
        LoraAdapter::new(a, b, alpha / r)
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.s
    }

    pub fn with_scaling(&self, s: f64) -> Self {
        LoraAdapter { s, ..self.clone() }
    }

    /// The materialized update `s * A B`.
    pub fn delta(&self, exec: Exec) -> DenseMatrix {
        self.a.matmul(&self.b, exec).expect("shapes checked at construction").scale(self.s)
    }
}

/// `Y = X (W + s A B)`, or `X W` without an adapter.
pub fn dense_forward(
    x: &DenseMatrix,
    w: &DenseMatrix,
    adapter: Option<&LoraAdapter>,
    exec: Exec,
) -> Result<DenseMatrix, QloraError> {
    let effective = match adapter {
        None => return x.matmul(w, exec),
        Some(ad) => {
            if ad.a.rows() != w.rows() || ad.b.cols() != w.cols() {
                return Err(QloraError::Shape {
                    op: "adapter vs weight",
                    left: (ad.a.rows(), ad.b.cols()),
                    right: w.shape(),
                });
            }
            w.add(&ad.delta(exec))?
        }
    };
    x.matmul(&effective, exec)
}

/// `Y = X dequant(q) + s (X A) B`, never forming `A B`.
pub fn qlora_forward(
    x: &DenseMatrix,
    q: &Nf4Quantized,
    adapter: &LoraAdapter,
    exec: Exec,
) -> Result<DenseMatrix, QloraError> {
    if adapter.a.rows() != q.shape().0 || adapter.b.cols() != q.shape().1 {
        return Err(QloraError::Shape {
            op: "adapter vs weight",
            left: (adapter.a.rows(), adapter.b.cols()),
            right: q.shape(),
        });
    }
    if x.cols() != q.shape().0 {
        return Err(QloraError::Shape { op: "matmul", left: x.shape(), right: q.shape() });
    }
    let base = x.matmul(&nf4_dequantize(q, exec), exec)?;
    let low_rank = x.matmul(&adapter.a, exec)?.matmul(&adapter.b, exec)?.scale(adapter.s);
    base.add(&low_rank)
}
