//! Small dense linear algebra, activations, norms and a DFT magnitude helper.
//!
//! Everything here is 64-bit. Matrices are row-major and small enough that no
//! sparse or blocked formats are needed; the batched products go through
//! `matrixmultiply`.

use std::ops::{Deref, DerefMut};

use rand::RngExt;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Sequence;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} values", rows * cols),
                format!("{} values", values.len()),
            ));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("DenseMatrix::from_rows", cols, row.len()));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: RngExt + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_shape(&self, other: &DenseMatrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn matvec(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.dim() != self.cols {
            return Err(Error::shape("matvec", self.cols, x.dim()));
        }
        let out = (0..self.rows).map(|i| dot(self.row(i), x)).collect();
        Ok(DenseVector(out))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Dense column vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl FromIterator<f64> for DenseVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W·x + b`.
pub fn affine(w: &DenseMatrix, x: &DenseVector, b: &DenseVector) -> Result<DenseVector> {
    if w.rows() != b.dim() {
        return Err(Error::shape("affine bias", w.rows(), b.dim()));
    }
    let mut y = w.matvec(x)?;
    for (yi, bi) in y.iter_mut().zip(b.iter()) {
        *yi += bi;
    }
    Ok(y)
}

/// Logistic function, evaluated without overflow for large |v|.
#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &DenseVector) -> DenseVector {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub fn tanh_act(v: &DenseVector) -> DenseVector {
    v.iter().map(|x| x.tanh()).collect()
}

/// Euclidean norm of a sequence over all time indices `1..=T`; the anchor is excluded.
pub fn seq_l2_norm(s: &Sequence) -> f64 {
    s.iter()
        .skip(1)
        .map(DenseVector::norm_sq)
        .sum::<f64>()
        .sqrt()
}

/// Magnitudes of the DFT coefficients for wavenumbers `0..=N/2`.
pub fn dft_magnitudes(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "DFT needs at least two samples, got {n}"
        )));
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok(buf[..=n / 2].iter().map(|c| c.norm()).collect())
}

/// Pairwise (balanced tree) summation over the given terms in index order.
///
/// The tree shape depends only on `terms.len()`, so the result is reproducible
/// no matter how the terms were produced.
pub fn tree_sum(terms: &[f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        n => {
            let mid = n / 2;
            tree_sum(&terms[..mid]) + tree_sum(&terms[mid..])
        }
    }
}

/// Elementwise version of [`tree_sum`] over equally sized buffers.
pub fn tree_sum_vecs(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    fn go(parts: &mut [Vec<f64>]) -> Vec<f64> {
        match parts.len() {
            0 => Vec::new(),
            1 => std::mem::take(&mut parts[0]),
            n => {
                let mid = n / 2;
                let (lo, hi) = parts.split_at_mut(mid);
                let mut a = go(lo);
                let b = go(hi);
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            }
        }
    }
    go(&mut parts)
}

/// Pairwise reduction of `parts` in index order with a shape that depends
/// only on `parts.len()`.
pub fn tree_reduce<T>(mut parts: Vec<T>, combine: impl Fn(&mut T, T) + Copy) -> Option<T> {
    fn go<T>(parts: &mut Vec<Option<T>>, lo: usize, hi: usize, combine: impl Fn(&mut T, T) + Copy) -> T {
        if hi - lo == 1 {
            return parts[lo].take().expect("each part is consumed once");
        }
        let mid = lo + (hi - lo) / 2;
        let mut a = go(parts, lo, mid, combine);
        let b = go(parts, mid, hi, combine);
        combine(&mut a, b);
        a
    }
    if parts.is_empty() {
        return None;
    }
    let n = parts.len();
    let mut slots: Vec<Option<T>> = parts.drain(..).map(Some).collect();
    Some(go(&mut slots, 0, n, combine))
}

/// `c = beta·c + a·bᵀ`, with `a` m×k and `b` n×k, both row-major.
pub(crate) fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += a·b`, with `a` m×k and `b` k×n, both row-major.
pub(crate) fn gemm_ab_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += aᵀ·b`, with `a` k×m and `b` k×n, both row-major.
pub(crate) fn gemm_atb_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
