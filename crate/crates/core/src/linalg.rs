//! Dense row-major matrices and the sparse propagation kernel.
//!
//! Everything runs in `f64` with a fixed summation order, so repeated calls on
//! identical inputs give bitwise-identical results.

use std::fmt;

use crate::dataset::NormalizedAdjacency;
use crate::error::{Error, Result};

/// Rows whose Euclidean norm falls below this are left untouched by
/// [`row_l2_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.values.len() <= 64 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

/// Dot product with four independent accumulators.
///
/// The split keeps the loop vectorizable while the final combination order is
/// fixed, so the result is still deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dst += alpha * src`
#[inline]
pub fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Fails with [`Error::NonFinite`] naming `what` if any entry is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = out.row_mut(r);
            for (k, &a) in lhs.iter().enumerate() {
                if a != 0.0 {
                    axpy(dst, a, other.row(k));
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; entry (r, s) is the dot product of row r with row s.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_transposed: {}x{} · ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let lhs = self.row(r);
            for s in 0..other.rows {
                out.values[r * other.rows + s] = dot(lhs, other.row(s));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn transpose_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "transpose_matmul: ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let rhs = other.row(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    axpy(out.row_mut(k), a, rhs);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Adds `v` to every row.
    pub fn rowwise_add(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "rowwise_add: vector of {} onto {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.same_shape(other, "add_scaled")?;
        axpy(&mut self.values, alpha, &other.values);
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|x| x * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Column sums.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// Sum of squared entries.
    pub fn squared_norm(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// New matrix made of the listed rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            values,
        }
    }

    /// Adds row `k` of `src` into row `idx[k]` of `self`.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Self) -> Result<()> {
        if src.rows != idx.len() || src.cols != self.cols {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} indices for {}x{} into {} columns",
                idx.len(),
                src.rows,
                src.cols,
                self.cols
            )));
        }
        for (k, &i) in idx.iter().enumerate() {
            let (lo, hi) = (i * self.cols, (i + 1) * self.cols);
            axpy(&mut self.values[lo..hi], 1.0, src.row(k));
        }
        Ok(())
    }

    /// Contiguous row range `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            values: self.values[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| dot(self.row(r), self.row(r)).sqrt())
            .collect()
    }
}

/// Output of [`row_l2_normalize`].
#[derive(Debug, Clone)]
pub struct NormalizedRows {
    pub matrix: DenseMatrix,
    /// Norm of each input row.
    pub norms: Vec<f64>,
    /// `true` where the row was below the guard and left unchanged.
    pub degenerate: Vec<bool>,
}

impl NormalizedRows {
    /// Pulls a gradient on the normalized rows back onto the raw rows.
    ///
    /// For `y = x / |x|` this is `(g - y (y·g)) / |x|`; degenerate rows pass
    /// the gradient through unchanged since they were copied verbatim.
    pub fn backward(&self, grad: &DenseMatrix) -> Result<DenseMatrix> {
        if grad.shape() != self.matrix.shape() {
            return Err(Error::Shape("normalize backward: gradient shape".into()));
        }
        let mut out = grad.clone();
        for r in 0..grad.rows() {
            if self.degenerate[r] {
                continue;
            }
            let y = self.matrix.row(r);
            let g = grad.row(r);
            let proj = dot(y, g);
            let inv = 1.0 / self.norms[r];
            for ((o, &gi), &yi) in out.row_mut(r).iter_mut().zip(g).zip(y) {
                *o = (gi - yi * proj) * inv;
            }
        }
        Ok(out)
    }
}

/// Scales each row to unit Euclidean norm; rows with norm below `eps` are
/// returned unchanged and flagged.
pub fn row_l2_normalize(x: &DenseMatrix, eps: f64) -> NormalizedRows {
    let norms = x.row_norms();
    let mut matrix = x.clone();
    let mut degenerate = vec![false; x.rows()];
    for (r, &n) in norms.iter().enumerate() {
        if n < eps {
            degenerate[r] = true;
            continue;
        }
        for v in matrix.row_mut(r) {
            *v /= n;
        }
    }
    NormalizedRows {
        matrix,
        norms,
        degenerate,
    }
}

/// Sparse × dense product `Y = Â X` with `Â` the normalized adjacency.
///
/// Row `i` of the output accumulates neighbours left to right in column order.
pub fn spmm(adj: &NormalizedAdjacency, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != adj.node_count() {
        return Err(Error::Shape(format!(
            "spmm: adjacency over {} nodes, operand has {} rows",
            adj.node_count(),
            x.rows()
        )));
    }
    let d = x.cols();
    let mut out = DenseMatrix::zeros(x.rows(), d);
    for i in 0..adj.node_count() {
        let dst = &mut out.values[i * d..(i + 1) * d];
        for (j, w) in adj.neighbors(i) {
            axpy(dst, w, x.row(j));
        }
    }
    Ok(out)
}
