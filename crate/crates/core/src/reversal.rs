//! Recovering a layer input `z` from its output `y = W z`, `W = X / sqrt(d)`.
//!
//! Start from the backward pass `z_1 = W^T y` and correct with
//! `z_{k+1} = z_k + gamma W^T (y - W z_k)`. The residual evolves as
//! `r_{k+1} = (I - gamma W W^T) r_k`, which is non-expansive for
//! `0 < gamma <= 2 / lambda_max(W W^T)`; we take `gamma = 1 / lambda_max`.

use thiserror::Error;

use crate::matrix::{norm2, MatrixError, SparseIntMatrix};
use crate::rng::{mix64, SplitMix64, AUX_LAYER_BASE};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_POWER_ITERS: usize = 1000;
pub const MIN_POWER_ITERS: usize = 10;

/// Default iteration budget, `100 n`.
pub fn default_max_iters(n: usize) -> usize {
    100 * n
}

const START_VECTOR_SEED: u64 = 0x7265_7665_7273_6531;

#[derive(Clone, Debug, PartialEq)]
pub struct ReverseResult {
    pub z_hat: Vec<f64>,
    pub iterations: usize,
    /// `||y - W z_k||_2` for `k = 1 ..= iterations + 1`.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl ReverseResult {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().expect("history is never empty")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReversalError {
    #[error("matrix has no non-zero entries")]
    ZeroMatrix,
    #[error("power iteration needs at least {MIN_POWER_ITERS} steps, got {0}")]
    TooFewPowerIters(usize),
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("no convergence after {} iterations (residual {:.3e})", .0.iterations, .0.final_residual())]
    NotConverged(Box<ReverseResult>),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

struct ScaledOp<'a> {
    x: &'a SparseIntMatrix,
    inv_sqrt_d: f64,
}

impl ScaledOp<'_> {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, MatrixError> {
        let mut out = self.x.mul_vec(v)?;
        out.iter_mut().for_each(|e| *e *= self.inv_sqrt_d);
        Ok(out)
    }

    fn apply_t(&self, u: &[f64]) -> Result<Vec<f64>, MatrixError> {
        let mut out = self.x.left_mul_vec(u)?;
        out.iter_mut().for_each(|e| *e *= self.inv_sqrt_d);
        Ok(out)
    }
}

/// `1 / lambda_max(W W^T)` with `lambda_max` from power iteration on a
/// fixed pseudo-random start vector.
pub fn estimate_gamma(x: &SparseIntMatrix, d: usize, power_iters: usize) -> Result<f64, ReversalError> {
    if power_iters < MIN_POWER_ITERS {
        return Err(ReversalError::TooFewPowerIters(power_iters));
    }
    if x.nnz() == 0 {
        return Err(ReversalError::ZeroMatrix);
    }
    let op = ScaledOp { x, inv_sqrt_d: 1.0 / (d as f64).sqrt() };
    let mut rng = SplitMix64::new(mix64(START_VECTOR_SEED, AUX_LAYER_BASE, 0));
    let mut v: Vec<f64> = (0..x.rows()).map(|_| rng.next_signed_unit()).collect();
    let mut lambda = 0.0;
    for _ in 0..power_iters {
        let nv = norm2(&v);
        if nv == 0.0 {
            break;
        }
        v.iter_mut().for_each(|e| *e /= nv);
        let w = op.apply(&op.apply_t(&v)?)?;
        lambda = norm2(&w);
        v = w;
    }
    if lambda == 0.0 {
        return Err(ReversalError::ZeroMatrix);
    }
    Ok(1.0 / lambda)
}

/// Backward pass plus iterative correction until
/// `||y - W z|| <= tol ||y||` or `max_iters` corrections.
pub fn reverse_iterate(
    x: &SparseIntMatrix,
    d: usize,
    y: &[f64],
    gamma: f64,
    max_iters: usize,
    tol: f64,
) -> Result<ReverseResult, ReversalError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(ReversalError::InvalidStep(gamma));
    }
    let op = ScaledOp { x, inv_sqrt_d: 1.0 / (d as f64).sqrt() };
    let target = tol * norm2(y);
    let mut z = op.apply_t(y)?;
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let wz = op.apply(&z)?;
        let r: Vec<f64> = y.iter().zip(&wz).map(|(a, b)| a - b).collect();
        let rn = norm2(&r);
        history.push(rn);
        if rn <= target {
            return Ok(ReverseResult { z_hat: z, iterations, residual_history: history, converged: true });
        }
        if iterations == max_iters {
            break;
        }
        let step = op.apply_t(&r)?;
        z.iter_mut().zip(&step).for_each(|(zi, si)| *zi += gamma * si);
        iterations += 1;
    }
    Err(ReversalError::NotConverged(Box::new(ReverseResult {
        z_hat: z,
        iterations,
        residual_history: history,
        converged: false,
    })))
}
