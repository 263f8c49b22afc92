//! Dense LU with partial pivoting and a 1-norm condition estimator.

use rayon::prelude::*;
use thiserror::Error;

use crate::matrix::{DenseMatrix, MatrixError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular: no non-zero pivot in column {column}")]
    Singular { column: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// `P A = L U` with unit lower-triangular `L`, stored together row-major.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    /// Row `i` of `P A` is row `perm[i]` of `A`.
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &DenseMatrix) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(MatrixError::DimensionMismatch(format!("LU of a {}x{} matrix", a.rows(), a.cols())).into());
        }
        let n = a.rows();
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot_abs) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs == 0.0 {
                return Err(LinalgError::Singular { column: k });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let (head, tail) = lu.split_at_mut((k + 1) * n);
            let pivot_row = &head[k * n..];
            let pivot = pivot_row[k];
            tail.par_chunks_mut(n).for_each(|row| {
                let l = row[k] / pivot;
                row[k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        row[j] -= l * pivot_row[j];
                    }
                }
            });
        }
        Ok(Self { n, lu, perm })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let s: f64 = row[i + 1..].iter().zip(&x[i + 1..]).map(|(u, v)| u * v).sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        // A^T = U^T L^T P, so solve U^T w = b, then L^T v = w, then x = P^T v.
        let mut w = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.lu[k * n + i] * w[k]).sum();
            w[i] = (w[i] - s) / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.lu[k * n + i] * w[k]).sum();
            w[i] -= s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        x
    }

    /// Solves `A X = B`, parallel over right-hand-side columns.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if b.rows() != self.n {
            return Err(MatrixError::DimensionMismatch(format!(
                "order {} system with {}x{} right-hand side",
                self.n,
                b.rows(),
                b.cols()
            ))
            .into());
        }
        let cols: Vec<Vec<f64>> = (0..b.cols()).into_par_iter().map(|j| self.solve(&b.column(j))).collect();
        Ok(DenseMatrix::from_fn(self.n, b.cols(), |i, j| cols[j][i]))
    }

    /// Lower-bound estimate of `||A^{-1}||_1` (Hager's method with Higham's
    /// alternating-sign safeguard, as in LAPACK `xLACON`).
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0f64;
        let mut last_col: Option<usize> = None;
        for iter in 0..5 {
            let y = self.solve(&x);
            let norm: f64 = y.iter().map(|v| v.abs()).sum();
            if iter > 0 && norm <= est {
                break;
            }
            est = norm;
            let xi: Vec<f64> = y.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transpose(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.abs()))
                .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if iter > 0 && (zmax <= ztx || last_col == Some(j)) {
                break;
            }
            x = vec![0.0; n];
            x[j] = 1.0;
            last_col = Some(j);
        }
        let alt: Vec<f64> = (0..n)
            .map(|i| {
                let mag = if n > 1 { 1.0 + i as f64 / (n - 1) as f64 } else { 1.0 };
                if i % 2 == 0 { mag } else { -mag }
            })
            .collect();
        let y = self.solve(&alt);
        let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est)
    }
}

/// Maximum absolute column sum.
pub fn norm1(a: &DenseMatrix) -> f64 {
    (0..a.cols())
        .map(|j| (0..a.rows()).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `||A||_1 * est(||A^{-1}||_1)`, clamped below at 1.
pub fn condition_estimate_1(a: &DenseMatrix, lu: &Lu) -> f64 {
    (norm1(a) * lu.inverse_norm1_estimate()).max(1.0)
}
