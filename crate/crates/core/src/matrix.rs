//! Exact integer sparse matrices and dense double-precision matrices.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate entry at ({row}, {col})")]
    DuplicateEntry { row: usize, col: usize },
    #[error("entry ({row}, {col}) outside a {rows}x{cols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

/// Sparse integer matrix in compressed-column form.
///
/// Rows are strictly ascending within each column and no stored value is
/// zero. Equality is structural, which for this canonical layout coincides
/// with mathematical equality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseIntMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<i64>,
}

impl SparseIntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            col_ptr: vec![0; cols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_columns(n, (0..n).map(|j| vec![(j, 1)]).collect())
            .expect("identity is well formed")
    }

    /// Builds a matrix from per-column entry lists. Entries within a column
    /// may arrive in any order; zeros are dropped.
    pub fn from_columns(rows: usize, columns: Vec<Vec<(usize, i64)>>) -> Result<Self, MatrixError> {
        let cols = columns.len();
        let mut col_ptr = Vec::with_capacity(cols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for (j, mut col) in columns.into_iter().enumerate() {
            col.retain(|&(_, v)| v != 0);
            col.sort_unstable_by_key(|&(r, _)| r);
            for w in col.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(MatrixError::DuplicateEntry { row: w[0].0, col: j });
                }
            }
            for (r, v) in col {
                if r >= rows {
                    return Err(MatrixError::OutOfBounds { row: r, col: j, rows, cols });
                }
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self { rows, cols, col_ptr, row_idx, values })
    }

    /// Builds a matrix from `(row, col, value)` triplets.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, i64)>,
    ) -> Result<Self, MatrixError> {
        let mut columns = vec![Vec::new(); cols];
        for (r, c, v) in triplets {
            if c >= cols {
                return Err(MatrixError::OutOfBounds { row: r, col: c, rows, cols });
            }
            columns[c].push((r, v));
        }
        Self::from_columns(rows, columns)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values of column `j`.
    pub fn column(&self, j: usize) -> (&[usize], &[i64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    pub fn column_entries(&self, j: usize) -> impl Iterator<Item = (usize, i64)> + '_ {
        let (r, v) = self.column(j);
        r.iter().copied().zip(v.iter().copied())
    }

    /// All entries as `(row, col, value)`, sorted by column then row.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, i64)> + '_ {
        (0..self.cols).flat_map(move |j| self.column_entries(j).map(move |(r, v)| (r, j, v)))
    }

    pub fn get(&self, row: usize, col: usize) -> i64 {
        let (r, v) = self.column(col);
        match r.binary_search(&row) {
            Ok(p) => v[p],
            Err(_) => 0,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut columns = vec![Vec::new(); self.rows];
        for (r, c, v) in self.triplets() {
            columns[r].push((c, v));
        }
        // Columns of the transpose receive rows in ascending order already.
        Self::from_columns(self.cols, columns).expect("transpose is well formed")
    }

    /// Rows as sorted `(col, value)` lists.
    pub fn row_lists(&self) -> Vec<Vec<(usize, i64)>> {
        let mut rows = vec![Vec::new(); self.rows];
        for (r, c, v) in self.triplets() {
            rows[r].push((c, v));
        }
        rows
    }

    pub fn map_values(&self, f: impl Fn(usize, usize, i64) -> i64) -> Self {
        let columns = (0..self.cols)
            .map(|j| self.column_entries(j).map(|(r, v)| (r, f(r, j, v))).collect())
            .collect();
        Self::from_columns(self.rows, columns).expect("same structure")
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v as f64;
        }
        m
    }

    /// `self * b`, parallel over output rows with a fixed accumulation order
    /// (ascending inner index).
    pub fn mul_dense(&self, b: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.cols != b.rows() {
            return Err(MatrixError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows,
                self.cols,
                b.rows(),
                b.cols()
            )));
        }
        let rows = self.row_lists();
        let m = b.cols();
        let mut out = DenseMatrix::zeros(self.rows, m);
        if m == 0 {
            return Ok(out);
        }
        out.values
            .par_chunks_mut(m)
            .zip(rows.par_iter())
            .for_each(|(dst, entries)| {
                for &(k, v) in entries {
                    let v = v as f64;
                    for (d, s) in dst.iter_mut().zip(b.row(k)) {
                        *d += v * s;
                    }
                }
            });
        Ok(out)
    }

    /// `u * self` for a dense row vector `u`.
    pub fn left_mul_vec(&self, u: &[f64]) -> Result<Vec<f64>, MatrixError> {
        if u.len() != self.rows {
            return Err(MatrixError::DimensionMismatch(format!(
                "row vector of length {} times {}x{}",
                u.len(),
                self.rows,
                self.cols
            )));
        }
        Ok((0..self.cols)
            .map(|j| self.column_entries(j).map(|(r, v)| u[r] * v as f64).sum())
            .collect())
    }

    /// `self * x` for a dense column vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>, MatrixError> {
        if x.len() != self.cols {
            return Err(MatrixError::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.rows];
        for (r, c, v) in self.triplets() {
            y[r] += v as f64 * x[c];
        }
        Ok(y)
    }

    /// Exact integer product `self * other`.
    pub fn mul_sparse(&self, other: &SparseIntMatrix) -> Result<SparseIntMatrix, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let columns = (0..other.cols)
            .into_par_iter()
            .map(|j| {
                let mut acc = std::collections::BTreeMap::new();
                for (k, b) in other.column_entries(j) {
                    for (r, a) in self.column_entries(k) {
                        *acc.entry(r).or_insert(0i64) += a * b;
                    }
                }
                acc.into_iter().collect()
            })
            .collect();
        Self::from_columns(self.rows, columns)
    }

    /// Per-row squared norms.
    pub fn row_norms_sq(&self) -> Vec<i64> {
        let mut out = vec![0; self.rows];
        for (r, _, v) in self.triplets() {
            out[r] += v * v;
        }
        out
    }
}

/// Dense row-major matrix of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, MatrixError> {
        if values.len() != rows * cols {
            return Err(MatrixError::DimensionMismatch(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..rows * cols).map(|p| f(p / cols, p % cols)).collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale(factor);
        self
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Location of the first non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }

    pub fn check_finite(&self) -> Result<(), MatrixError> {
        match self.find_non_finite() {
            Some((row, col)) => Err(MatrixError::NonFinite { row, col }),
            None => Ok(()),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(MatrixError::DimensionMismatch(format!(
                "{}x{} minus {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, values })
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.cols + j]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_columns_sorts_and_drops_zeros() {
        let m = SparseIntMatrix::from_columns(3, vec![vec![(2, 1), (0, -2), (1, 0)], vec![]]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.column(0), (&[0usize, 2][..], &[-2i64, 1][..]));
        assert_eq!(m.get(1, 0), 0);
    }

    #[test]
    fn duplicate_entries_rejected() {
        let err = SparseIntMatrix::from_columns(3, vec![vec![(1, 1), (1, 2)]]).unwrap_err();
        assert_eq!(err, MatrixError::DuplicateEntry { row: 1, col: 0 });
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(SparseIntMatrix::from_triplets(2, 2, [(2, 0, 1)]).is_err());
        assert!(SparseIntMatrix::from_triplets(2, 2, [(0, 2, 1)]).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let m = SparseIntMatrix::from_triplets(3, 2, [(0, 0, 1), (2, 0, -3), (1, 1, 2)]).unwrap();
        let t = m.transpose();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.get(0, 2), -3);
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn sparse_dense_product_matches_hand_computation() {
        // [[1, 0], [2, -1]] * [[1, 2], [3, 4]] = [[1, 2], [-1, 0]]
        let a = SparseIntMatrix::from_triplets(2, 2, [(0, 0, 1), (1, 0, 2), (1, 1, -1)]).unwrap();
        let b = DenseMatrix::from_row_major(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = a.mul_dense(&b).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 2.0, -1.0, 0.0]);
        assert_eq!(a.left_mul_vec(&[1.0, 1.0]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(a.mul_vec(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(a.mul_sparse(&a).unwrap().to_dense().as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn product_dimension_mismatch() {
        let a = SparseIntMatrix::zeros(2, 3);
        assert!(a.mul_dense(&DenseMatrix::zeros(2, 2)).is_err());
        assert!(a.mul_vec(&[0.0; 2]).is_err());
        assert!(a.left_mul_vec(&[0.0; 3]).is_err());
    }

    #[test]
    fn non_finite_detection() {
        let mut m = DenseMatrix::zeros(2, 2);
        assert!(m.check_finite().is_ok());
        m[(1, 0)] = f64::NAN;
        assert_eq!(m.check_finite(), Err(MatrixError::NonFinite { row: 1, col: 0 }));
    }
}
