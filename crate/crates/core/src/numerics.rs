//! Dense f64 linear algebra: just enough for Hessian-based quantization
//! and the block score predictor. Row-major storage, no BLAS, no views.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// A Cholesky pivot was non-positive (or non-finite): the matrix is not
    /// positive-definite, typically a sign of insufficient dampening.
    NotPositiveDefinite { pivot: usize },
    /// Cosine similarity of a zero-norm vector is undefined.
    ZeroVector,
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::NotPositiveDefinite { pivot } => {
                write!(f, "matrix not positive-definite at pivot {pivot}")
            }
            NumericsError::ZeroVector => write!(f, "cosine of zero-norm vector"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NumericsError {}

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        DenseMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// self (r×k) · other (k×c).
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(r);
                for c in 0..orow.len() {
                    out_row[c] += a * orow[c];
                }
            }
        }
        out
    }

    /// self (r×c) · x (c).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = dot(self.row(r), x);
        }
        out
    }

    /// selfᵀ · self, as a (cols × cols) symmetric matrix. With token
    /// vectors stored as rows this is Σᵢ xᵢxᵢᵀ.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.cols;
        let mut out = DenseMatrix::zeros(n, n);
        for r in 0..self.rows {
            let x = self.row(r);
            for i in 0..n {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let orow = out.row_mut(i);
                for j in i..n {
                    orow[j] += xi * x[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                let v = out.get(j, i);
                out.set(i, j, v);
            }
        }
        out
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

/// Lower-triangular L with L·Lᵀ = a, for symmetric positive-definite a.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    assert_eq!(a.rows(), a.cols(), "cholesky needs a square matrix");
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut piv = a.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            piv -= v * v;
        }
        if piv <= 0.0 || !piv.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { pivot: j });
        }
        let ljj = math::sqrt(piv);
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor:
/// a⁻¹ = L⁻ᵀ·L⁻¹.
pub fn cholesky_inverse(a: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    let l = cholesky(a)?;
    let n = a.rows();

    // Invert the lower-triangular factor by forward substitution.
    let mut linv = DenseMatrix::zeros(n, n);
    for j in 0..n {
        linv.set(j, j, 1.0 / l.get(j, j));
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l.get(i, k) * linv.get(k, j);
            }
            linv.set(i, j, s / l.get(i, i));
        }
    }

    // a⁻¹[i][j] = Σ_k Linv[k][i]·Linv[k][j]; fill the lower half and mirror.
    let mut inv = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv.get(k, i) * linv.get(k, j);
            }
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    Ok(inv)
}

/// Cosine similarity x·y / (‖x‖‖y‖), clamped into [-1, 1].
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64, NumericsError> {
    assert_eq!(x.len(), y.len(), "cosine length mismatch");
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(NumericsError::ZeroVector);
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}
