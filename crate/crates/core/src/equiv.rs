//! Equality of factors up to column permutation and per-column sign.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::genmodel::forward_product;
use crate::matrix::{DenseMatrix, MatrixError, SparseIntMatrix};

type ColumnKey = (Vec<usize>, Vec<i64>);

/// Canonical form of one column and the sign that produced it.
fn canonical_column(x: &SparseIntMatrix, j: usize) -> (ColumnKey, i8) {
    let (rows, vals) = x.column(j);
    let flip: i8 = if vals.first().is_some_and(|&v| v < 0) { -1 } else { 1 };
    let vals = vals.iter().map(|&v| v * flip as i64).collect();
    ((rows.to_vec(), vals), flip)
}

/// Negates columns so each first non-zero is positive, then sorts columns by
/// (row indices, values).
pub fn canonicalize_columns(x: &SparseIntMatrix) -> SparseIntMatrix {
    let mut keys: Vec<ColumnKey> = (0..x.cols()).map(|j| canonical_column(x, j).0).collect();
    keys.sort();
    let columns = keys.into_iter().map(|(r, v)| r.into_iter().zip(v).collect()).collect();
    SparseIntMatrix::from_columns(x.rows(), columns).expect("columns come from a valid matrix")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched: bool,
    pub mismatched: usize,
    /// `permutation[j] = k` when column `j` of the candidate equals
    /// `flips[j]` times column `k` of the reference.
    pub permutation: Vec<Option<usize>>,
    /// `+1` or `-1` for matched columns, `0` otherwise.
    pub flips: Vec<i8>,
    /// Whether the reference has repeated columns (matched arbitrarily).
    pub duplicates: bool,
}

/// Matches the columns of `xhat` against those of `x` by exact canonical
/// equality. Repeated columns are paired in ascending index order.
pub fn match_factors(xhat: &SparseIntMatrix, x: &SparseIntMatrix) -> Result<MatchResult, MatrixError> {
    if (xhat.rows(), xhat.cols()) != (x.rows(), x.cols()) {
        return Err(MatrixError::DimensionMismatch(format!(
            "{}x{} against {}x{}",
            xhat.rows(),
            xhat.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let mut buckets: HashMap<ColumnKey, Vec<(usize, i8)>> = HashMap::new();
    for k in 0..x.cols() {
        let (key, flip) = canonical_column(x, k);
        buckets.entry(key).or_default().push((k, flip));
    }
    let duplicates = buckets.values().any(|b| b.len() > 1);
    for b in buckets.values_mut() {
        b.reverse();
    }
    let mut permutation = Vec::with_capacity(xhat.cols());
    let mut flips = Vec::with_capacity(xhat.cols());
    let mut mismatched = 0;
    for j in 0..xhat.cols() {
        let (key, flip_hat) = canonical_column(xhat, j);
        match buckets.get_mut(&key).and_then(Vec::pop) {
            Some((k, flip_ref)) => {
                permutation.push(Some(k));
                flips.push(flip_hat * flip_ref);
            }
            None => {
                permutation.push(None);
                flips.push(0);
                mismatched += 1;
            }
        }
    }
    Ok(MatchResult { matched: mismatched == 0, mismatched, permutation, flips, duplicates })
}

/// Matches a recovered chain layer by layer. The symmetry found for layer
/// `i` is undone on the rows of layer `i + 1` before matching it; once a
/// layer fails, later layers are reported fully mismatched.
pub fn match_chain(
    recovered: &[SparseIntMatrix],
    truth: &[SparseIntMatrix],
) -> Result<Vec<MatchResult>, MatrixError> {
    if recovered.len() != truth.len() {
        return Err(MatrixError::DimensionMismatch(format!(
            "{} recovered factors against {} true factors",
            recovered.len(),
            truth.len()
        )));
    }
    let mut out = Vec::with_capacity(truth.len());
    // Row j of the next recovered factor corresponds to row perm[j] of the
    // next true factor, scaled by flips[j].
    let mut carry: Option<(Vec<usize>, Vec<i8>)> = None;
    let mut broken = false;
    for (xhat, x) in recovered.iter().zip(truth) {
        if broken {
            let cols = x.cols();
            out.push(MatchResult {
                matched: false,
                mismatched: cols,
                permutation: vec![None; cols],
                flips: vec![0; cols],
                duplicates: false,
            });
            continue;
        }
        let aligned = match &carry {
            None => xhat.clone(),
            Some((perm, flips)) => {
                let triplets = xhat.triplets().map(|(r, c, v)| (perm[r], c, v * flips[r] as i64));
                SparseIntMatrix::from_triplets(xhat.rows(), xhat.cols(), triplets)?
            }
        };
        let m = match_factors(&aligned, x)?;
        if m.matched {
            carry = Some((m.permutation.iter().map(|p| p.expect("matched")).collect(), m.flips.clone()));
        } else {
            broken = true;
        }
        out.push(m);
    }
    Ok(out)
}

/// `||prod(factors) (1/sqrt(d))^s - Y||_F / max(||Y||_F, 1e-300)`.
pub fn reconstruction_error(factors: &[SparseIntMatrix], y: &DenseMatrix, d: usize) -> Result<f64, MatrixError> {
    let p = forward_product(factors, d)?;
    Ok(p.sub(y)?.frobenius_norm() / y.frobenius_norm().max(1e-300))
}
