use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{Mat, SymMat};

/// Lower-triangular Cholesky factor `S = L Lᵀ` of a positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    l: Mat<T>,
}

impl<T: Real> Cholesky<T> {
    /// Returns `None` unless `s` is numerically positive definite.
    pub fn new(s: &SymMat<T>) -> Option<Self> {
        let n = s.dim();
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut diag = s[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > T::zero()) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut v = s[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / ljj;
            }
        }
        Some(Self { l })
    }

    pub fn factor(&self) -> &Mat<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] = y[i] - self.l[(i, k)] * y[k];
            }
            y[i] /= self.l[(i, i)];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] = y[i] - self.l[(k, i)] * y[k];
            }
            y[i] /= self.l[(i, i)];
        }
        y
    }

    /// Solves `L y = b` (forward substitution only).
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] = y[i] - self.l[(i, k)] * y[k];
            }
            y[i] /= self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> SymMat<T> {
        let n = self.dim();
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            cols.push(self.solve(&e));
        }
        SymMat::from_upper_fn(n, |i, j| T::lit(0.5) * (cols[j][i] + cols[i][j]))
    }

    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.dim()).map(|i| two * self.l[(i, i)].ln()).sum()
    }
}

/// Solves the square system `a x = b` by LU with partial pivoting.
///
/// Fails with [`Error::Singular`] when a pivot falls below `n·ε·max|a|`.
pub fn solve_linear<T: Real>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "system {}x{} with rhs {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let tiny = T::from_usize_lossy(n.max(1)) * T::epsilon() * a.max_abs();
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, lu[(r, col)].abs()))
            .fold((col, T::zero()), |best, c| if c.1 > best.1 { c } else { best });
        if pmax <= tiny || pmax == T::zero() {
            return Err(Error::Singular);
        }
        if piv != col {
            for j in 0..n {
                let t = lu[(col, j)];
                lu[(col, j)] = lu[(piv, j)];
                lu[(piv, j)] = t;
            }
            x.swap(col, piv);
        }
        let d = lu[(col, col)];
        for r in col + 1..n {
            let factor = lu[(r, col)] / d;
            if factor == T::zero() {
                continue;
            }
            for j in col..n {
                let v = lu[(col, j)];
                lu[(r, j)] -= factor * v;
            }
            let xc = x[col];
            x[r] -= factor * xc;
        }
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for j in i + 1..n {
            v -= lu[(i, j)] * x[j];
        }
        x[i] = v / lu[(i, i)];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves() {
        let s = SymMat::<f64>::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let c = s.cholesky().unwrap();
        let x = c.solve(&[2.0, 1.0]);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        assert!((c.log_det() - 8.0f64.ln()).abs() < 1e-14);
        let inv = c.inverse();
        assert!((inv[(0, 0)] - 3.0 / 8.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(SymMat::from_diag(&[1.0, -1e-12]).cholesky().is_none());
        assert!(SymMat::<f64>::zeros(2).cholesky().is_none());
    }

    #[test]
    fn lu_pivots_and_detects_singular() {
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(solve_linear(&a, &[3.0, 4.0]).unwrap(), vec![2.0, 3.0]);
        let s = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(solve_linear(&s, &[1.0, 1.0]), Err(Error::Singular)));
    }
}
