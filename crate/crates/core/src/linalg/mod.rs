//! Small dense matrices: general row-major [`Mat`] and exactly-symmetric [`SymMat`].
//!
//! Sizes in this crate stay well below a hundred, so everything is dense and
//! allocation-happy. Eigenvalues come from Householder tridiagonalization
//! followed by implicit QL ([`eigen`]).

mod eigen;
mod factor;

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use eigen::SymmetricEigen;
pub use factor::{solve_linear, Cholesky};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<T>>", try_from = "Vec<Vec<T>>")]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat<T>) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// Adds `self * v` into `out` without allocating. Panics on shape mismatch.
    pub fn matvec_acc(&self, v: &[T], scale: T, out: &mut [T]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let s: T = self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum();
            *o += scale * s;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Mat<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Mat<T>) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> From<Mat<T>> for Vec<Vec<T>> {
    fn from(m: Mat<T>) -> Self {
        m.to_rows()
    }
}

impl<T: Real> TryFrom<Vec<Vec<T>>> for Mat<T> {
    type Error = Error;
    fn try_from(rows: Vec<Vec<T>>) -> Result<Self> {
        Mat::from_rows(&rows)
    }
}

/// Symmetric matrix. Entry `(i, j)` equals `(j, i)` bitwise; every constructor
/// enforces this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<T>>", try_from = "Vec<Vec<T>>")]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct SymMat<T> {
    inner: Mat<T>,
}

impl<T: Real> SymMat<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            inner: Mat::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            inner: Mat::identity(n),
        }
    }

    pub fn scaled_identity(n: usize, s: T) -> Self {
        Self::from_diag(&vec![s; n])
    }

    pub fn from_diag(diag: &[T]) -> Self {
        Self {
            inner: Mat::from_diag(diag),
        }
    }

    /// Fills the upper triangle from `f(i, j)` with `i <= j` and mirrors it.
    pub fn from_upper_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { inner: m }
    }

    /// Symmetric part `(m + mᵀ) / 2` of a square matrix.
    pub fn symmetrize(m: &Mat<T>) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch(format!(
                "cannot symmetrize {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let half = T::lit(0.5);
        Ok(Self::from_upper_fn(m.rows(), |i, j| {
            if i == j {
                m[(i, i)]
            } else {
                half * (m[(i, j)] + m[(j, i)])
            }
        }))
    }

    /// Accepts a square matrix that is symmetric up to `tol` (absolute, scaled by
    /// the largest entry) and returns its symmetric part.
    pub fn from_mat_checked(m: &Mat<T>, tol: T) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::InvalidMatrix("not square".into()));
        }
        if !m.is_finite() {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let scale = T::one().max(m.max_abs());
        for i in 0..m.rows() {
            for j in i + 1..m.cols() {
                if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                    return Err(Error::InvalidMatrix(format!(
                        "asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Self::symmetrize(m)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = Mat::from_rows(rows)?;
        Self::from_mat_checked(&m, T::zero())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.inner
    }

    pub fn into_mat(self) -> Mat<T> {
        self.inner
    }

    /// Sets `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.inner[(i, j)] = v;
        self.inner[(j, i)] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.inner.is_finite()
    }

    pub fn add(&self, other: &SymMat<T>) -> Result<Self> {
        Ok(Self {
            inner: self.inner.add(&other.inner)?,
        })
    }

    pub fn sub(&self, other: &SymMat<T>) -> Result<Self> {
        Ok(Self {
            inner: self.inner.sub(&other.inner)?,
        })
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            inner: self.inner.scaled(s),
        }
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: T, other: &SymMat<T>) {
        assert_eq!(self.dim(), other.dim());
        for (a, &b) in self.inner.data.iter_mut().zip(&other.inner.data) {
            *a += s * b;
        }
    }

    pub fn add_diag(&mut self, s: T) {
        for i in 0..self.dim() {
            self.inner[(i, i)] += s;
        }
    }

    pub fn trace(&self) -> T {
        (0..self.dim()).map(|i| self.inner[(i, i)]).sum()
    }

    /// `vᵀ S v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        assert_eq!(v.len(), self.dim());
        let mut acc = T::zero();
        for i in 0..self.dim() {
            let row: T = self.inner.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum();
            acc += v[i] * row;
        }
        acc
    }

    /// `Xᵀ S X` for a general `X` with `dim()` rows.
    pub fn congruence(&self, x: &Mat<T>) -> Result<SymMat<T>> {
        let sx = self.inner.matmul(x)?;
        let prod = x.transpose().matmul(&sx)?;
        SymMat::symmetrize(&prod)
    }

    pub fn principal_block(&self, start: usize, len: usize) -> SymMat<T> {
        Self {
            inner: self.inner.block(start, start, len, len),
        }
    }

    pub fn eigen(&self) -> Result<SymmetricEigen<T>> {
        SymmetricEigen::new(self)
    }

    pub fn eigenvalues(&self) -> Result<Vec<T>> {
        Ok(self.eigen()?.values)
    }

    /// Smallest eigenvalue.
    pub fn min_eig(&self) -> Result<T> {
        Ok(self.eigenvalues()?[0])
    }

    /// Largest eigenvalue.
    pub fn max_eig(&self) -> Result<T> {
        let ev = self.eigenvalues()?;
        Ok(ev[ev.len() - 1])
    }

    /// True iff the largest eigenvalue is at most `tol`.
    pub fn is_nsd(&self, tol: T) -> Result<bool> {
        if tol < T::zero() {
            return Err(Error::InvalidMatrix("negative tolerance".into()));
        }
        Ok(self.max_eig()? <= tol)
    }

    pub fn cholesky(&self) -> Option<Cholesky<T>> {
        Cholesky::new(self)
    }
}

impl<T> Index<(usize, usize)> for SymMat<T> {
    type Output = T;
    #[inline]
    fn index(&self, idx: (usize, usize)) -> &T {
        &self.inner[idx]
    }
}

impl<T: Real> From<SymMat<T>> for Vec<Vec<T>> {
    fn from(m: SymMat<T>) -> Self {
        m.inner.to_rows()
    }
}

impl<T: Real> TryFrom<Vec<Vec<T>>> for SymMat<T> {
    type Error = Error;
    fn try_from(rows: Vec<Vec<T>>) -> Result<Self> {
        // Serialized matrices may have been hand edited; accept round-off asymmetry.
        let m = Mat::from_rows(&rows)?;
        SymMat::from_mat_checked(&m, T::lit(1e-9))
    }
}

/// Smallest eigenvalue of `m`.
pub fn min_eig<T: Real>(m: &SymMat<T>) -> Result<T> {
    m.min_eig()
}

/// True iff every eigenvalue of `m` is at most `tol`.
pub fn is_nsd<T: Real>(m: &SymMat<T>, tol: T) -> Result<bool> {
    m.is_nsd(tol)
}
