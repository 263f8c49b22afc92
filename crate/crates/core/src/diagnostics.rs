//! Empirical concentration measurements on random chains.
//!
//! These report measured quantities next to the asymptotic growth scale
//! `M = (c ln n)^{log_d n}`; nothing here asserts an asymptotic bound.
//!
//! Trial `t` uses the chain seeded by `mix64(master_seed, AUX_LAYER_BASE, t)`
//! and probe vectors drawn from auxiliary substreams of that trial seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::genmodel::{chain_scale, forward_product, gen_factor_chain, gen_sparse_column, ModelParams};
use crate::matrix::{DenseMatrix, MatrixError, SparseIntMatrix};
use crate::rng::{mix64, AUX_LAYER_BASE};

/// Redraw budget when looking for a probe disjoint from the first one.
const DISJOINT_ATTEMPTS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentStats {
    pub layer: usize,
    pub nnz: usize,
    pub max_abs: f64,
    /// `sum_i q_i^2`.
    pub second_moment: f64,
    /// `sum_i q_i^4`.
    pub fourth_moment: f64,
    /// `mean_i q_i w_i` for the paired probe `w`.
    pub cross_moment: f64,
}

impl MomentStats {
    pub fn measure(layer: usize, q: &[f64], w: &[f64]) -> Self {
        let nnz = q.iter().filter(|v| **v != 0.0).count();
        let max_abs = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let second_moment = q.iter().map(|v| v * v).sum();
        let fourth_moment = q.iter().map(|v| v.powi(4)).sum();
        let cross_moment = if q.is_empty() {
            0.0
        } else {
            q.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / q.len() as f64
        };
        Self { layer, nnz, max_abs, second_moment, fourth_moment, cross_moment }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryScale {
    /// `(c ln n)^{log_d n}`; infinite when `d = 1`.
    pub m: f64,
    pub c: f64,
}

impl TheoryScale {
    pub const DEFAULT_C: f64 = 2.0;

    pub fn new(n: usize, d: usize, c: f64) -> Self {
        let base = (c * (n as f64).ln()).max(1.0);
        let m = if d <= 1 { f64::INFINITY } else { base.powf((n as f64).ln() / (d as f64).ln()) };
        Self { m, c }
    }

    /// `M sqrt(c ln n)`, the scale for a single propagated entry.
    pub fn entry_bound(&self, n: usize) -> f64 {
        self.m * (self.c * (n as f64).ln()).sqrt()
    }
}

/// `u Z_1 ... Z_l (1/sqrt(d))^l` for a `1 x n` integer row vector `u`.
pub fn propagate_vector(u: &SparseIntMatrix, zs: &[SparseIntMatrix], d: usize) -> Result<DenseMatrix, MatrixError> {
    if u.rows() != 1 {
        return Err(MatrixError::DimensionMismatch(format!("probe must be a row vector, got {} rows", u.rows())));
    }
    let mut q = u.to_dense().as_slice().to_vec();
    for z in zs {
        q = z.left_mul_vec(&q)?;
    }
    let scale = chain_scale(d, zs.len());
    q.iter_mut().for_each(|v| *v *= scale);
    DenseMatrix::from_row_major(1, q.len(), q)
}

fn row_vector(n: usize, entries: Vec<(usize, i64)>) -> SparseIntMatrix {
    SparseIntMatrix::from_triplets(1, n, entries.into_iter().map(|(c, v)| (0, c, v))).expect("valid probe")
}

fn trial_seed(params: &ModelParams, trial: usize) -> u64 {
    mix64(params.master_seed, AUX_LAYER_BASE, trial as u64)
}

type Probe = Vec<(usize, i64)>;

/// Two probes for a trial: `u`, and `v` drawn until its support is disjoint
/// from `u` (the last draw is kept if the budget runs out).
fn probe_pair(params: &ModelParams, seed: u64) -> (Probe, Probe) {
    let (n, d) = (params.n, params.d);
    let u = gen_sparse_column(n, d, mix64(seed, AUX_LAYER_BASE + 1, 0));
    let mut v = Vec::new();
    for k in 0..DISJOINT_ATTEMPTS {
        v = gen_sparse_column(n, d, mix64(seed, AUX_LAYER_BASE + 2, k));
        if v.iter().all(|(r, _)| u.binary_search_by_key(r, |&(q, _)| q).is_err()) {
            break;
        }
    }
    (u, v)
}

/// Per-layer aggregate over trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub nnz_mean: f64,
    pub nnz_max: usize,
    pub maxabs_mean: f64,
    pub maxabs_max: f64,
    pub m2: f64,
    pub m4: f64,
    pub cross: f64,
    pub bound_m_scale: f64,
}

impl LayerProfile {
    pub const CSV_HEADER: &'static str = "layer,nnz_mean,nnz_max,maxabs_mean,maxabs_max,m2,m4,cross,bound_M_scale";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.layer,
            self.nnz_mean,
            self.nnz_max,
            self.maxabs_mean,
            self.maxabs_max,
            self.m2,
            self.m4,
            self.cross,
            self.bound_m_scale
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthProfile {
    pub layers: Vec<LayerProfile>,
    pub scale: TheoryScale,
    /// Per-trial statistics, `per_trial[t][l]` for layer `l = 0 ..= s`.
    pub per_trial: Vec<Vec<MomentStats>>,
}

/// Propagates a disjoint probe pair through a fresh chain per trial and
/// records moment statistics after every layer (`l = 0` is the probe itself).
pub fn entry_growth_profile(params: &ModelParams, trials: usize, c: f64) -> GrowthProfile {
    let (n, d, s) = (params.n, params.d, params.s);
    let per_trial: Vec<Vec<MomentStats>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(params, t);
            let chain = gen_factor_chain(&ModelParams { master_seed: seed, ..*params });
            let (u, v) = probe_pair(params, seed);
            let mut q: Vec<f64> = row_vector(n, u).to_dense().as_slice().to_vec();
            let mut w: Vec<f64> = row_vector(n, v).to_dense().as_slice().to_vec();
            let mut stats = vec![MomentStats::measure(0, &q, &w)];
            // Integer partial products; scaled per layer only for the statistics.
            for (l, z) in chain.iter().enumerate() {
                q = z.left_mul_vec(&q).expect("square chain");
                w = z.left_mul_vec(&w).expect("square chain");
                let scale = chain_scale(d, l + 1);
                let qs: Vec<f64> = q.iter().map(|x| x * scale).collect();
                let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
                stats.push(MomentStats::measure(l + 1, &qs, &ws));
            }
            stats
        })
        .collect();

    let scale = TheoryScale::new(n, d, c);
    let bound = scale.entry_bound(n);
    let tf = trials.max(1) as f64;
    let layers = (0..=s)
        .map(|l| {
            let col = per_trial.iter().map(|st| st[l]);
            LayerProfile {
                layer: l,
                nnz_mean: col.clone().map(|m| m.nnz as f64).sum::<f64>() / tf,
                nnz_max: col.clone().map(|m| m.nnz).max().unwrap_or(0),
                maxabs_mean: col.clone().map(|m| m.max_abs).sum::<f64>() / tf,
                maxabs_max: col.clone().map(|m| m.max_abs).fold(0.0, f64::max),
                m2: col.clone().map(|m| m.second_moment).sum::<f64>() / tf,
                m4: col.clone().map(|m| m.fourth_moment).sum::<f64>() / tf,
                cross: col.map(|m| m.cross_moment).sum::<f64>() / tf,
                bound_m_scale: bound,
            }
        })
        .collect();
    GrowthProfile { layers, scale, per_trial }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalStats {
    pub mean_ratio: f64,
    pub max_deviation: f64,
    pub rows_used: usize,
    /// Rows of `X_1` that are entirely zero (ratio undefined).
    pub rows_skipped: usize,
}

/// Ratio `d (Y Y^T)_ii / ||(X_1)_i||^2` over all rows and trials.
pub fn diagonal_concentration(params: &ModelParams, trials: usize) -> DiagonalStats {
    let d = params.d as f64;
    let per_trial: Vec<(Vec<f64>, usize)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let chain = gen_factor_chain(&ModelParams { master_seed: trial_seed(params, t), ..*params });
            let y = forward_product(&chain, params.d).expect("square chain");
            let norms = chain[0].row_norms_sq();
            let mut ratios = Vec::with_capacity(params.n);
            let mut skipped = 0;
            for (i, &nx) in norms.iter().enumerate() {
                if nx == 0 {
                    skipped += 1;
                    continue;
                }
                let yi = y.row(i);
                let g: f64 = yi.iter().map(|v| v * v).sum();
                ratios.push(d * g / nx as f64);
            }
            (ratios, skipped)
        })
        .collect();
    let mut sum = 0.0;
    let mut max_dev = 0.0f64;
    let mut used = 0;
    let mut skipped = 0;
    for (ratios, sk) in per_trial {
        skipped += sk;
        for r in ratios {
            sum += r;
            max_dev = max_dev.max((r - 1.0).abs());
            used += 1;
        }
    }
    DiagonalStats {
        mean_ratio: if used > 0 { sum / used as f64 } else { f64::NAN },
        max_deviation: max_dev,
        rows_used: used,
        rows_skipped: skipped,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Second probe drawn with support disjoint from the first.
    Disjoint,
    /// Second probe equal to the first.
    Identical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEstimate {
    /// Mean over trials of `mean_i q_i w_i` after `layer` layers.
    pub estimate: f64,
    /// Standard error across trial means.
    pub std_error: f64,
    pub layer: usize,
    pub trials: usize,
}

impl CrossEstimate {
    /// `|estimate| / std_error`.
    pub fn z_score(&self) -> f64 {
        self.estimate.abs() / self.std_error
    }
}

/// Cross moment `E[q_i w_i]` of two probes propagated through `params.s`
/// layers of a fresh chain per trial.
pub fn cross_correlation_estimate(params: &ModelParams, trials: usize, pairing: Pairing) -> CrossEstimate {
    let n = params.n;
    let means: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(params, t);
            let chain = gen_factor_chain(&ModelParams { master_seed: seed, ..*params });
            let (u, v) = probe_pair(params, seed);
            let v = match pairing {
                Pairing::Disjoint => v,
                Pairing::Identical => u.clone(),
            };
            let q = propagate_vector(&row_vector(n, u), &chain, params.d).expect("square chain");
            let w = propagate_vector(&row_vector(n, v), &chain, params.d).expect("square chain");
            q.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>() / n as f64
        })
        .collect();
    let tf = trials as f64;
    let estimate = means.iter().sum::<f64>() / tf;
    let std_error = if trials > 1 {
        let var = means.iter().map(|m| (m - estimate).powi(2)).sum::<f64>() / (tf - 1.0);
        (var / tf).sqrt()
    } else {
        f64::INFINITY
    };
    CrossEstimate { estimate, std_error, layer: params.s, trials }
}
