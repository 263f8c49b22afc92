//! Random d-sparse factor chains and their scaled forward product.
//!
//! Column `j` of layer `i` (0-based) is the sum of `d` signed unit spikes
//! drawn from the substream `mix64(master_seed, i, j)`. Each spike consumes
//! one 64-bit draw `r`: the position is `mulhi(r, n)` and the sign is `+1`
//! when the lowest bit of `r` is clear, `-1` otherwise. Colliding spikes add
//! up; exact cancellations are dropped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{DenseMatrix, MatrixError, SparseIntMatrix};
use crate::rng::{mix64, mul_high, SplitMix64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("matrix order n = {0} must be at least 2")]
    OrderTooSmall(usize),
    #[error("sparsity d = {d} must satisfy 1 <= d <= n = {n}")]
    Sparsity { d: usize, n: usize },
    #[error("depth s must be at least 1")]
    Depth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub d: usize,
    pub s: usize,
    pub master_seed: u64,
}

impl ModelParams {
    pub fn new(n: usize, d: usize, s: usize, master_seed: u64) -> Result<Self, ParamError> {
        let p = Self { n, d, s, master_seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if self.n < 2 {
            return Err(ParamError::OrderTooSmall(self.n));
        }
        if self.d < 1 || self.d > self.n {
            return Err(ParamError::Sparsity { d: self.d, n: self.n });
        }
        if self.s < 1 {
            return Err(ParamError::Depth);
        }
        Ok(())
    }

    /// Whether depth and order suggest the double-precision product may carry
    /// accumulated relative error above 1e-9.
    pub fn precision_warning(&self) -> bool {
        precision_risk(self.n, self.s)
    }
}

pub(crate) fn precision_risk(n: usize, s: usize) -> bool {
    // Worst-case dot-product rounding bound: n unit roundoffs per layer.
    s as f64 * n as f64 * f64::EPSILON > 1e-9
}

/// One random d-sparse column as sorted `(row, value)` pairs.
pub fn gen_sparse_column(n: usize, d: usize, substream_seed: u64) -> Vec<(usize, i64)> {
    let mut rng = SplitMix64::new(substream_seed);
    let mut spikes: Vec<(usize, i64)> = (0..d)
        .map(|_| {
            let r = rng.next_u64();
            let sign = if r & 1 == 0 { 1 } else { -1 };
            (mul_high(r, n), sign)
        })
        .collect();
    spikes.sort_unstable_by_key(|&(p, _)| p);
    let mut col: Vec<(usize, i64)> = Vec::with_capacity(d);
    for (p, v) in spikes {
        match col.last_mut() {
            Some((q, acc)) if *q == p => *acc += v,
            _ => col.push((p, v)),
        }
    }
    col.retain(|&(_, v)| v != 0);
    col
}

/// A random d-sparse `n x n` matrix for `layer` of the chain seeded by `master_seed`.
pub fn gen_layer(n: usize, d: usize, master_seed: u64, layer: u64) -> SparseIntMatrix {
    let columns = (0..n)
        .into_par_iter()
        .map(|j| gen_sparse_column(n, d, mix64(master_seed, layer, j as u64)))
        .collect();
    SparseIntMatrix::from_columns(n, columns).expect("generated columns are well formed")
}

pub fn gen_factor_chain(params: &ModelParams) -> Vec<SparseIntMatrix> {
    (0..params.s)
        .map(|i| gen_layer(params.n, params.d, params.master_seed, i as u64))
        .collect()
}

/// `(1/sqrt(d))^s`.
pub fn chain_scale(d: usize, s: usize) -> f64 {
    (1.0 / (d as f64).sqrt()).powi(s as i32)
}

/// `X_1 X_2 ... X_s (1/sqrt(d))^s`.
///
/// Evaluated right to left: the last factor is densified, each preceding
/// factor multiplies from the left, and the scale is applied once at the end.
/// Integer partial products therefore stay exact while they fit in 53 bits.
pub fn forward_product(factors: &[SparseIntMatrix], d: usize) -> Result<DenseMatrix, MatrixError> {
    let last = factors
        .last()
        .ok_or_else(|| MatrixError::DimensionMismatch("empty factor list".into()))?;
    let n = last.rows();
    if let Some(bad) = factors.iter().find(|f| f.rows() != n || f.cols() != n) {
        return Err(MatrixError::DimensionMismatch(format!(
            "factor of shape {}x{} in a chain of order {n}",
            bad.rows(),
            bad.cols()
        )));
    }
    if d == 0 {
        return Err(MatrixError::DimensionMismatch("d must be at least 1".into()));
    }
    let mut acc = last.to_dense();
    for f in factors.iter().rev().skip(1) {
        acc = f.mul_dense(&acc)?;
    }
    acc.scale(chain_scale(d, factors.len()));
    Ok(acc)
}
