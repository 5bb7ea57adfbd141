//! Dense row-major `f64` matrices, a symmetric eigensolver, and a
//! reverse-mode autodiff tape over the fixed primitive set the rest of
//! the crate is built from.
//!
//! Everything here is plain CPU code: matrices are immutable values,
//! operations are pure functions, and a [`Tape`] is owned by exactly one
//! forward/backward pass.

use thiserror::Error;

pub mod eigen;
pub mod grad;
pub mod tape;

pub use eigen::{sym_eigen, sym_eigen_with_cap, EigenDecomposition};
pub use grad::{compare_gradients, finite_diff_gradient, GradCheckReport};
pub use tape::{Gradients, NodeId, Tape};

/// Errors from matrix construction, kernels, the eigensolver, and the tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("matrix data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("{op}: non-finite value produced or supplied")]
    NonFinite { op: &'static str },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asym:.3e}")]
    NotSymmetric { max_asym: f64 },
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("tolerance must be positive, got {0}")]
    NonPositiveTolerance(f64),
    #[error("backward requires a scalar loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("batch normalization needs at least 2 rows in train mode, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("elementwise log requires strictly positive entries (found {value:.3e})")]
    LogDomain { value: f64 },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },
    #[error("softmax mask leaves row {row} with empty support")]
    EmptyMaskRow { row: usize },
    #[error("{op}: index out of range")]
    IndexOutOfRange { op: &'static str },
}

/// Dense row-major matrix of `f64`. Values are finite after every public
/// operation; constructors validate, kernels preserve finiteness on finite
/// inputs (the few that can overflow check their outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength { rows, cols, got: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Matrix::new" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a generator; the generator must produce finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                debug_assert!(v.is_finite());
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self, TensorError> {
        let cols = data.len();
        Self::new(1, cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        Ok(())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { rows: n, cols: m, data: out })
    }

    /// BLAS-style product with optional transposition of either operand.
    pub fn gemm(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self, TensorError> {
        match (trans_a, trans_b) {
            (false, false) => self.matmul(other),
            (true, false) => self.transpose().matmul(other),
            (false, true) => self.matmul(&other.transpose()),
            (true, true) => self.transpose().matmul(&other.transpose()),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, c: f64) -> Result<Self, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let data = self.data.iter().map(|a| a * c).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self, TensorError> {
        self.same_shape(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Adds `row` (a 1xC matrix) to every row of `self`.
    pub fn add_row_broadcast(&self, row: &Self) -> Result<Self, TensorError> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: row.rows,
                rhs_cols: row.cols,
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] += row.data[j];
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Self {
        let data = self.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Row-wise softmax with max-subtraction. Each output row sums to 1.
    pub fn softmax_rows(&self) -> Self {
        self.softmax_rows_masked(None).expect("unmasked softmax cannot fail")
    }

    /// Row-wise softmax restricted to `mask` support (row-major booleans,
    /// same shape). Entries outside the support are exactly zero.
    pub fn softmax_rows_masked(&self, mask: Option<&[bool]>) -> Result<Self, TensorError> {
        if let Some(m) = mask {
            if m.len() != self.data.len() {
                return Err(TensorError::DataLength {
                    rows: self.rows,
                    cols: self.cols,
                    got: m.len(),
                });
            }
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let base = i * self.cols;
            let allowed = |j: usize| mask.is_none_or(|m| m[base + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..self.cols {
                if allowed(j) && self.data[base + j] > max {
                    max = self.data[base + j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::EmptyMaskRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..self.cols {
                if allowed(j) {
                    let e = (self.data[base + j] - max).exp();
                    out.data[base + j] = e;
                    sum += e;
                }
            }
            for j in 0..self.cols {
                out.data[base + j] /= sum;
            }
        }
        Ok(out)
    }

    /// Column means: RxC -> 1xC.
    pub fn mean_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.data[i * self.cols + j];
            }
        }
        let inv = 1.0 / self.rows as f64;
        for v in &mut out.data {
            *v *= inv;
        }
        out
    }

    pub fn mean_all(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self, TensorError> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs_rows: rows,
                    lhs_cols: cols,
                    rhs_rows: p.rows,
                    rhs_cols: p.cols,
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self, TensorError> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs_rows: rows,
                    lhs_cols: cols,
                    rhs_rows: p.rows,
                    rhs_cols: p.cols,
                });
            }
            for i in 0..rows {
                out.data[i * cols + offset..i * cols + offset + p.cols]
                    .copy_from_slice(p.row(i));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self, TensorError> {
        if start + len > self.rows {
            return Err(TensorError::IndexOutOfRange { op: "slice_rows" });
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Ok(Self { rows: len, cols: self.cols, data })
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn ln(&self) -> Result<Self, TensorError> {
        for &v in &self.data {
            if v <= 0.0 {
                return Err(TensorError::LogDomain { value: v });
            }
        }
        let data = self.data.iter().map(|v| v.ln()).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn exp(&self) -> Result<Self, TensorError> {
        let data: Vec<f64> = self.data.iter().map(|v| v.exp()).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Scales every row to unit Euclidean norm. Rows of zero norm are an error.
    pub fn row_normalize(&self) -> Result<Self, TensorError> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let norm = self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 0.0 {
                return Err(TensorError::ZeroNormRow { row: i });
            }
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v /= norm;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Cosine similarity between two equal-length vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na * nb))
}
