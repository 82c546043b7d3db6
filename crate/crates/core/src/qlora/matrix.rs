use rand::Rng;

use super::QloraError;
use crate::exec::{self, Exec};

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, QloraError> {
        if rows == 0 || cols == 0 {
            return Err(QloraError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(QloraError::DataLength { expected: rows * cols, got: data.len() });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(QloraError::NonFinite { index: i });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Entries drawn uniformly from `[-1, 1)`.
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, rhs: &DenseMatrix, exec: Exec) -> Result<DenseMatrix, QloraError> {
        if self.cols != rhs.rows {
            return Err(QloraError::Shape { op: "matmul", left: self.shape(), right: rhs.shape() });
        }
        let (n, k) = (rhs.cols, self.cols);
        let mut out = DenseMatrix::zeros(self.rows, n);
        exec::for_each_chunk_mut(exec, &mut out.data, n, |i, row| {
            let lhs = &self.data[i * k..(i + 1) * k];
            for (p, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let r = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(r) {
                    *o += a * b;
                }
            }
        });
        Ok(out)
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, QloraError> {
        if self.shape() != rhs.shape() {
            return Err(QloraError::Shape { op: "add", left: self.shape(), right: rhs.shape() });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Numerical rank via Gaussian elimination with partial pivoting.
    pub fn rank(&self, tol: f64) -> usize {
        let (m, n) = self.shape();
        let mut a = self.data.clone();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut rank = 0;
        for col in 0..n {
            if rank == m {
                break;
            }
            let (piv, best) =
                (rank..m)
                    .map(|r| (r, a[r * n + col].abs()))
                    .fold((rank, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= tol * scale {
                continue;
            }
            for j in 0..n {
                a.swap(rank * n + j, piv * n + j);
            }
            for r in rank + 1..m {
                let f = a[r * n + col] / a[rank * n + col];
                for j in col..n {
                    a[r * n + j] -= f * a[rank * n + j];
                }
            }
            rank += 1;
        }
        rank
    }
}
