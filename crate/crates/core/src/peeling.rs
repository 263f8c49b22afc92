//! Layer-by-layer factorization of a chain product.
//!
//! Each pass rounds the scaled Gram of the remaining product, recovers the
//! top factor from it, and solves that factor out of the product. The last
//! factor is read off directly as `round(sqrt(d) * Y_remaining)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equiv::reconstruction_error;
use crate::gram::{rounded_gram, GramError, AMBIGUOUS_MARGIN};
use crate::linalg::{condition_estimate_1, LinalgError, Lu};
use crate::matrix::{DenseMatrix, MatrixError, SparseIntMatrix};
use crate::recovery::{recover_factor, RecoveryConfig, RecoveryError};

pub const DEFAULT_KAPPA_MAX: f64 = 1e8;
/// Relative residual above which a layer solve is rejected.
pub const MAX_SOLVE_RESIDUAL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSolveResult {
    /// The remaining product `(Xhat / sqrt(d))^{-1} Y`.
    pub peeled: DenseMatrix,
    /// `||(Xhat / sqrt(d)) Y' - Y||_F / ||Y||_F`.
    pub residual: f64,
    /// 1-norm condition estimate of `Xhat / sqrt(d)`.
    pub cond_estimate: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeelError {
    #[error("factor is singular (zero pivot column {column})")]
    Singular { column: usize },
    #[error("ill-conditioned solve: cond ~ {:.3e}, residual {:.3e}", .0.cond_estimate, .0.residual)]
    IllConditioned(Box<LayerSolveResult>),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

impl From<LinalgError> for PeelError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Singular { column } => PeelError::Singular { column },
            LinalgError::Matrix(m) => PeelError::Matrix(m),
        }
    }
}

fn scaled_factor(xhat: &SparseIntMatrix, d: usize) -> DenseMatrix {
    xhat.to_dense().scaled(1.0 / (d as f64).sqrt())
}

/// 1-norm condition estimate of `X / sqrt(d)`.
pub fn condition_estimate(x: &SparseIntMatrix, d: usize) -> Result<f64, PeelError> {
    let a = scaled_factor(x, d);
    let lu = Lu::factor(&a)?;
    Ok(condition_estimate_1(&a, &lu))
}

/// Solves `(Xhat / sqrt(d)) Y' = Y` by LU with partial pivoting.
pub fn solve_layer(
    xhat: &SparseIntMatrix,
    y: &DenseMatrix,
    d: usize,
    kappa_max: f64,
) -> Result<LayerSolveResult, PeelError> {
    if !xhat.is_square() || !y.is_square() || xhat.rows() != y.rows() {
        return Err(MatrixError::DimensionMismatch(format!(
            "factor {}x{} against product {}x{}",
            xhat.rows(),
            xhat.cols(),
            y.rows(),
            y.cols()
        ))
        .into());
    }
    let a = scaled_factor(xhat, d);
    let lu = Lu::factor(&a)?;
    let peeled = lu.solve_matrix(y)?;
    let cond_estimate = condition_estimate_1(&a, &lu);

    let back = a_times(&a, &peeled);
    let residual = back.sub(y)?.frobenius_norm() / y.frobenius_norm().max(1e-300);
    let result = LayerSolveResult { peeled, residual, cond_estimate };
    if cond_estimate > kappa_max || residual > MAX_SOLVE_RESIDUAL || !residual.is_finite() {
        return Err(PeelError::IllConditioned(Box::new(result)));
    }
    Ok(result)
}

fn a_times(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    use rayon::prelude::*;
    let (n, m) = (a.rows(), b.cols());
    let mut out = DenseMatrix::zeros(n, m);
    out.as_mut_slice().par_chunks_mut(m.max(1)).enumerate().for_each(|(i, dst)| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                for (o, &bkj) in dst.iter_mut().zip(b.row(k)) {
                    *o += aik * bkj;
                }
            }
        }
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStatus {
    Ok,
    AmbiguousRounding,
    IncompleteRecovery,
    IllConditioned,
    /// Recovery refused because `d` is below the supported minimum.
    UnsupportedD,
}

impl LayerStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerStatus::Ok => "ok",
            LayerStatus::AmbiguousRounding => "ambiguous_rounding",
            LayerStatus::IncompleteRecovery => "incomplete_recovery",
            LayerStatus::IllConditioned => "ill_conditioned",
            LayerStatus::UnsupportedD => "unsupported_d",
        }
    }
}

impl std::fmt::Display for LayerStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// 1-based layer index.
    pub index: usize,
    /// Rounding margin: of the scaled Gram for peeled layers, of
    /// `sqrt(d) * Y_remaining` for the last layer.
    pub margin: f64,
    /// Recovered column count.
    pub candidates: usize,
    pub residual: Option<f64>,
    pub cond: Option<f64>,
    pub status: LayerStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub layers: Vec<LayerReport>,
    /// Relative Frobenius error of the recovered chain; absent unless every
    /// layer produced a factor.
    pub reconstruction_error: Option<f64>,
    pub elapsed_ms: f64,
}

impl FactorizationReport {
    pub fn all_ok(&self) -> bool {
        self.layers.iter().all(|l| l.status == LayerStatus::Ok)
    }

    /// First non-ok status, or `Ok`.
    pub fn worst_status(&self) -> LayerStatus {
        self.layers
            .iter()
            .map(|l| l.status)
            .find(|s| *s != LayerStatus::Ok)
            .unwrap_or(LayerStatus::Ok)
    }

    /// Zeroes every wall-time so reports are byte-reproducible.
    pub fn clear_timings(&mut self) {
        self.elapsed_ms = 0.0;
        self.layers.iter_mut().for_each(|l| l.elapsed_ms = 0.0);
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("product is {rows}x{cols}, expected {n}x{n}")]
    Shape { rows: usize, cols: usize, n: usize },
    #[error("depth must be at least 1")]
    Depth,
    #[error("d must be at least 1")]
    Sparsity,
    #[error("product contains a non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Rounds `sqrt(d) * y` entrywise; returns the factor and the rounding margin.
fn round_last_layer(y: &DenseMatrix, d: usize) -> (SparseIntMatrix, f64) {
    let scale = (d as f64).sqrt();
    let mut margin = 0.0f64;
    let mut triplets = Vec::new();
    for i in 0..y.rows() {
        for (j, &v) in y.row(i).iter().enumerate() {
            let g = scale * v;
            let r = g.round();
            margin = margin.max((g - r).abs());
            if r != 0.0 {
                triplets.push((i, j, r as i64));
            }
        }
    }
    let m = SparseIntMatrix::from_triplets(y.rows(), y.cols(), triplets).expect("in-bounds entries");
    (m, margin)
}

/// Recovers `X_1, ..., X_s` from `Y = X_1 ... X_s (1/sqrt(d))^s`.
///
/// Recovered factors carry the interleaved permutation and sign symmetries
/// of the problem. Layer failures are recorded in the report: recovery
/// failures and singular factors end the chain, ill-conditioned solves and
/// ambiguous rounding are flagged and the chain continues.
pub fn factorize_chain(
    y: &DenseMatrix,
    n: usize,
    d: usize,
    s: usize,
    cfg: &RecoveryConfig,
    kappa_max: f64,
) -> Result<(Vec<SparseIntMatrix>, FactorizationReport), ChainError> {
    let start = Instant::now();
    if y.rows() != n || y.cols() != n {
        return Err(ChainError::Shape { rows: y.rows(), cols: y.cols(), n });
    }
    if s == 0 {
        return Err(ChainError::Depth);
    }
    if d == 0 {
        return Err(ChainError::Sparsity);
    }
    if let Some((row, col)) = y.find_non_finite() {
        return Err(ChainError::NonFinite { row, col });
    }
    cfg.validate()?;

    let mut factors = Vec::with_capacity(s);
    let mut layers = Vec::with_capacity(s);
    let mut remaining = y.clone();
    let mut chain_broken = false;

    for index in 1..s {
        let t = Instant::now();
        let gram = match rounded_gram(&remaining, d) {
            Ok(g) => g,
            Err(GramError::NonFinite { row, col }) => {
                return Err(ChainError::NonFinite { row, col });
            }
            Err(GramError::Matrix(_)) => unreachable!("remaining product is square"),
        };
        let margin = gram.margin();
        let mut report = LayerReport {
            index,
            margin,
            candidates: 0,
            residual: None,
            cond: None,
            status: LayerStatus::Ok,
            detail: None,
            elapsed_ms: 0.0,
        };
        let xhat = match recover_factor(&gram, n, cfg) {
            Ok(x) => {
                report.candidates = n;
                x
            }
            Err(e) => {
                report.status = match e {
                    RecoveryError::Unsupported { .. } => LayerStatus::UnsupportedD,
                    RecoveryError::IncompleteRecovery { found, .. } => {
                        report.candidates = found;
                        LayerStatus::IncompleteRecovery
                    }
                    other => return Err(other.into()),
                };
                report.detail = Some(e.to_string());
                report.elapsed_ms = elapsed_ms(t);
                layers.push(report);
                chain_broken = true;
                break;
            }
        };
        match solve_layer(&xhat, &remaining, d, kappa_max) {
            Ok(res) => {
                report.residual = Some(res.residual);
                report.cond = Some(res.cond_estimate);
                if gram.ambiguous() {
                    report.status = LayerStatus::AmbiguousRounding;
                    report.detail = Some(format!("margin {margin:.3} >= {AMBIGUOUS_MARGIN}"));
                }
                remaining = res.peeled;
            }
            Err(PeelError::IllConditioned(res)) => {
                report.residual = Some(res.residual);
                report.cond = Some(res.cond_estimate);
                report.status = LayerStatus::IllConditioned;
                report.detail = Some(format!(
                    "cond ~ {:.3e} (limit {kappa_max:.1e}), residual {:.3e}",
                    res.cond_estimate, res.residual
                ));
                remaining = res.peeled;
            }
            Err(PeelError::Singular { column }) => {
                report.status = LayerStatus::IllConditioned;
                report.detail = Some(format!("singular factor: zero pivot column {column}"));
                report.elapsed_ms = elapsed_ms(t);
                layers.push(report);
                factors.push(xhat);
                chain_broken = true;
                break;
            }
            Err(PeelError::Matrix(_)) => unreachable!("shapes checked above"),
        }
        report.elapsed_ms = elapsed_ms(t);
        layers.push(report);
        factors.push(xhat);
    }

    if !chain_broken {
        let t = Instant::now();
        let (last, margin) = round_last_layer(&remaining, d);
        let nonzero_cols = (0..n).filter(|&j| !last.column(j).0.is_empty()).count();
        let (status, detail) = if nonzero_cols < n {
            (LayerStatus::IncompleteRecovery, Some(format!("{} zero columns after rounding", n - nonzero_cols)))
        } else if margin >= AMBIGUOUS_MARGIN {
            (LayerStatus::AmbiguousRounding, Some(format!("margin {margin:.3} >= {AMBIGUOUS_MARGIN}")))
        } else {
            (LayerStatus::Ok, None)
        };
        layers.push(LayerReport {
            index: s,
            margin,
            candidates: nonzero_cols,
            residual: None,
            cond: None,
            status,
            detail,
            elapsed_ms: elapsed_ms(t),
        });
        factors.push(last);
    }

    let reconstruction_error = if factors.len() == s {
        Some(reconstruction_error(&factors, y, d).expect("factors match the product order"))
    } else {
        None
    };
    let report = FactorizationReport { layers, reconstruction_error, elapsed_ms: elapsed_ms(start) };
    Ok((factors, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve() {
        let y = DenseMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64 - 3.5);
        let r = solve_layer(&SparseIntMatrix::identity(4), &y, 1, DEFAULT_KAPPA_MAX).unwrap();
        assert_eq!(r.peeled, y);
        assert!(r.residual < 1e-15);
        assert!((r.cond_estimate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_solve() {
        let x = SparseIntMatrix::from_triplets(2, 2, [(0, 0, 1), (1, 1, 2)]).unwrap();
        let y = DenseMatrix::from_row_major(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let r = solve_layer(&x, &y, 1, DEFAULT_KAPPA_MAX).unwrap();
        assert_eq!(r.peeled.as_slice(), &[2.0, 0.0, 0.0, 1.0]);
        assert!((r.cond_estimate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_and_ill_conditioned() {
        let x = SparseIntMatrix::from_triplets(2, 2, [(0, 0, 1), (1, 0, 1)]).unwrap();
        let y = DenseMatrix::identity(2);
        assert_eq!(solve_layer(&x, &y, 1, DEFAULT_KAPPA_MAX), Err(PeelError::Singular { column: 1 }));

        let x = SparseIntMatrix::from_triplets(2, 2, [(0, 0, 1000), (1, 1, 1)]).unwrap();
        match solve_layer(&x, &y, 1, 10.0) {
            Err(PeelError::IllConditioned(r)) => assert!((r.cond_estimate - 1000.0).abs() < 1e-9),
            other => panic!("expected IllConditioned, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch() {
        let r = solve_layer(&SparseIntMatrix::identity(3), &DenseMatrix::identity(2), 1, 1e8);
        assert!(matches!(r, Err(PeelError::Matrix(_))));
    }

    #[test]
    fn depth_one_is_a_single_rounding() {
        let x = SparseIntMatrix::from_triplets(3, 3, [(0, 0, 1), (2, 0, -1), (1, 1, 3), (0, 2, -1), (1, 2, 1)])
            .unwrap();
        let y = x.to_dense().scaled(1.0 / 3f64.sqrt());
        let (f, rep) = factorize_chain(&y, 3, 3, 1, &RecoveryConfig::new(3), DEFAULT_KAPPA_MAX).unwrap();
        assert_eq!(f, vec![x]);
        assert!(rep.all_ok());
        assert!(rep.reconstruction_error.unwrap() < 1e-15);
    }

    #[test]
    fn zero_product_fails_recovery() {
        let y = DenseMatrix::zeros(16, 16);
        let (f, rep) = factorize_chain(&y, 16, 8, 2, &RecoveryConfig::new(8), DEFAULT_KAPPA_MAX).unwrap();
        assert!(f.is_empty());
        assert_eq!(rep.layers.len(), 1);
        assert_eq!(rep.layers[0].status, LayerStatus::IncompleteRecovery);
        assert_eq!(rep.layers[0].candidates, 0);
        assert_eq!(rep.reconstruction_error, None);

        let (_, rep) = factorize_chain(&y, 16, 8, 1, &RecoveryConfig::new(8), DEFAULT_KAPPA_MAX).unwrap();
        assert_eq!(rep.layers[0].status, LayerStatus::IncompleteRecovery);
    }

    #[test]
    fn small_d_reports_unsupported() {
        let y = DenseMatrix::identity(8);
        let (_, rep) = factorize_chain(&y, 8, 4, 2, &RecoveryConfig::new(4), DEFAULT_KAPPA_MAX).unwrap();
        assert_eq!(rep.worst_status(), LayerStatus::UnsupportedD);
    }

    #[test]
    fn precondition_errors() {
        let y = DenseMatrix::identity(4);
        let cfg = RecoveryConfig::new(8);
        assert!(matches!(factorize_chain(&y, 5, 8, 1, &cfg, 1e8), Err(ChainError::Shape { .. })));
        assert_eq!(factorize_chain(&y, 4, 8, 0, &cfg, 1e8).unwrap_err(), ChainError::Depth);
    }

    #[test]
    fn report_json_shape() {
        let rep = FactorizationReport {
            layers: vec![LayerReport {
                index: 1,
                margin: 0.25,
                candidates: 4,
                residual: Some(1e-12),
                cond: Some(10.0),
                status: LayerStatus::AmbiguousRounding,
                detail: None,
                elapsed_ms: 0.0,
            }],
            reconstruction_error: None,
            elapsed_ms: 0.0,
        };
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["layers"][0]["status"], "ambiguous_rounding");
        assert_eq!(v["layers"][0]["cond"], 10.0);
        assert!(v["reconstruction_error"].is_null());
    }
}
