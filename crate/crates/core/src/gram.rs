//! Rounded correlation structure of the top factor.
//!
//! For `Y = X Z` with `Z` the scaled product of the deeper factors, the
//! off-diagonal of `d * Y Y^T` rounds to the off-diagonal of `X X^T` for
//! integer `X`. The factor `d` cancels the `1/sqrt(d)` that the generator
//! attaches to `X`; this is the only place the two scaling conventions meet.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_sparse_triplets;
use crate::matrix::{dot, DenseMatrix, MatrixError, SparseIntMatrix};

/// Margin at or above which rounding is flagged as ambiguous.
pub const AMBIGUOUS_MARGIN: f64 = 0.45;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GramError {
    #[error("input contains a non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Symmetric integer-weighted graph on `n` nodes.
///
/// Only non-zero off-diagonal weights are stored, as sorted adjacency lists.
#[derive(Clone, Debug, PartialEq)]
pub struct GramGraph {
    n: usize,
    adjacency: Vec<Vec<(usize, i64)>>,
    margin: f64,
    diag: Option<Vec<f64>>,
}

impl GramGraph {
    /// Graph from `(i, j, weight)` edges; zero weights and self-loops are
    /// ignored, later duplicates overwrite earlier ones.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, i64)>) -> Self {
        let mut map = std::collections::BTreeMap::new();
        for (i, j, w) in edges {
            assert!(i < n && j < n, "edge ({i}, {j}) outside a graph of {n} nodes");
            if i != j {
                map.insert((i.min(j), i.max(j)), w);
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for ((i, j), w) in map {
            if w != 0 {
                adjacency[i].push((j, w));
                adjacency[j].push((i, w));
            }
        }
        for a in &mut adjacency {
            a.sort_unstable();
        }
        Self { n, adjacency, margin: 0.0, diag: None }
    }

    /// Exact correlation graph of the rows of `x`: weights are the
    /// off-diagonal entries of `x x^T`, the diagonal holds squared row norms.
    pub fn from_exact(x: &SparseIntMatrix) -> Self {
        let n = x.rows();
        let exact = exact_gram(x);
        let adjacency = exact
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().filter(|&&(j, _)| j != i).copied().collect())
            .collect();
        let diag = x.row_norms_sq().into_iter().map(|v| v as f64).collect();
        Self { n, adjacency, margin: 0.0, diag: Some(diag) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Largest distance of an off-diagonal scaled Gram entry from its
    /// nearest integer.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn ambiguous(&self) -> bool {
        self.margin >= AMBIGUOUS_MARGIN
    }

    /// Unrounded scaled diagonal, when known.
    pub fn diag(&self) -> Option<&[f64]> {
        self.diag.as_deref()
    }

    /// Attaches a diagonal to a graph built from edges.
    pub fn with_diag(mut self, diag: Vec<f64>) -> Self {
        assert_eq!(diag.len(), self.n, "diagonal length");
        self.diag = Some(diag);
        self
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, i64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn weight(&self, i: usize, j: usize) -> i64 {
        let a = &self.adjacency[i];
        match a.binary_search_by_key(&j, |&(k, _)| k) {
            Ok(p) => a[p].1,
            Err(_) => 0,
        }
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.weight(i, j) != 0
    }

    /// Edges `(i, j, w)` with `i < j`, in ascending `(i, j)` order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, i64)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.iter().filter(move |&&(j, _)| j > i).map(move |&(j, w)| (i, j, w)))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Copy of the graph with edge `{i, j}` deleted.
    pub fn without_edge(&self, i: usize, j: usize) -> Self {
        let mut g = self.clone();
        g.adjacency[i].retain(|&(k, _)| k != j);
        g.adjacency[j].retain(|&(k, _)| k != i);
        g
    }

    /// Writes the upper triangle (`row < col`) as SMF1.
    pub fn write_smf<W: Write>(&self, w: W) -> io::Result<()> {
        let mut entries: Vec<(usize, usize, i64)> = self.edges().collect();
        entries.sort_unstable_by_key(|&(r, c, _)| (c, r));
        write_sparse_triplets(self.n, self.n, &entries, w)
    }

    pub fn sidecar(&self) -> GramSidecar {
        GramSidecar { margin: self.margin, ambiguous: self.ambiguous() }
    }
}

/// JSON companion of the SMF1 dump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramSidecar {
    pub margin: f64,
    pub ambiguous: bool,
}

/// Exact `x x^T` as sorted per-row lists, diagonal included.
pub fn exact_gram(x: &SparseIntMatrix) -> Vec<Vec<(usize, i64)>> {
    let rows = x.row_lists();
    rows.par_iter()
        .map(|row| {
            let mut acc = std::collections::BTreeMap::new();
            for &(g, a) in row {
                for (k, b) in x.column_entries(g) {
                    *acc.entry(k).or_insert(0i64) += a * b;
                }
            }
            acc.into_iter().filter(|&(_, v)| v != 0).collect()
        })
        .collect()
}

/// Diagonal entry, upper-triangle weights and margin of one row.
type UpperRow = (f64, Vec<(usize, i64)>, f64);

/// Scaled Gram `d * Y Y^T`, rounded off the diagonal.
pub fn rounded_gram(y: &DenseMatrix, d: usize) -> Result<GramGraph, GramError> {
    if !y.is_square() {
        return Err(MatrixError::DimensionMismatch(format!("Y is {}x{}", y.rows(), y.cols())).into());
    }
    if let Some((row, col)) = y.find_non_finite() {
        return Err(GramError::NonFinite { row, col });
    }
    let n = y.rows();
    let scale = d as f64;
    // Row i computes entries (i, j) for j >= i, each as one ascending dot product.
    let upper: Vec<UpperRow> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = y.row(i);
            let diag = scale * dot(yi, yi);
            let mut weights = Vec::new();
            let mut margin = 0.0f64;
            for j in i + 1..n {
                let g = scale * dot(yi, y.row(j));
                let r = g.round();
                margin = margin.max((g - r).abs());
                if r != 0.0 {
                    weights.push((j, r as i64));
                }
            }
            (diag, weights, margin)
        })
        .collect();

    let mut adjacency: Vec<Vec<(usize, i64)>> = vec![Vec::new(); n];
    let mut diag = Vec::with_capacity(n);
    let mut margin = 0.0f64;
    for (i, (dg, weights, m)) in upper.into_iter().enumerate() {
        diag.push(dg);
        margin = margin.max(m);
        for (j, w) in weights {
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
    }
    // Lower neighbours were pushed in ascending i, upper ones after them in
    // ascending j, so each list is already sorted.
    Ok(GramGraph { n, adjacency, margin, diag: Some(diag) })
}

/// Deviation of the scaled Gram from the true integer correlations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    /// Largest `|d (Y Y^T)_ij - (X X^T)_ij|` over `i != j`.
    pub max_deviation: f64,
    /// Counts of deviations in bins of width [`MarginReport::BIN_WIDTH`]
    /// over `[0, 1)`; the last bin collects everything at or above 1.
    pub histogram: Vec<u64>,
    /// Off-diagonal entries whose rounding differs from the truth.
    pub disagreements: u64,
}

impl MarginReport {
    pub const BIN_WIDTH: f64 = 0.01;
    pub const BINS: usize = 101;

    pub fn bin_of(deviation: f64) -> usize {
        ((deviation / Self::BIN_WIDTH) as usize).min(Self::BINS - 1)
    }
}

pub fn gram_margin(y: &DenseMatrix, d: usize, truth: &SparseIntMatrix) -> Result<MarginReport, GramError> {
    if !y.is_square() || truth.rows() != y.rows() {
        return Err(MatrixError::DimensionMismatch(format!(
            "Y is {}x{}, truth is {}x{}",
            y.rows(),
            y.cols(),
            truth.rows(),
            truth.cols()
        ))
        .into());
    }
    if let Some((row, col)) = y.find_non_finite() {
        return Err(GramError::NonFinite { row, col });
    }
    let n = y.rows();
    let exact = exact_gram(truth);
    let scale = d as f64;
    let partial: Vec<(f64, Vec<u64>, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = y.row(i);
            let mut hist = vec![0u64; MarginReport::BINS];
            let mut max_dev = 0.0f64;
            let mut disagree = 0u64;
            let truth_row = &exact[i];
            for j in i + 1..n {
                let g = scale * dot(yi, y.row(j));
                let t = match truth_row.binary_search_by_key(&j, |&(k, _)| k) {
                    Ok(p) => truth_row[p].1,
                    Err(_) => 0,
                };
                let dev = (g - t as f64).abs();
                max_dev = max_dev.max(dev);
                hist[MarginReport::bin_of(dev)] += 1;
                if g.round() != t as f64 {
                    disagree += 1;
                }
            }
            (max_dev, hist, disagree)
        })
        .collect();
    let mut report = MarginReport { max_deviation: 0.0, histogram: vec![0; MarginReport::BINS], disagreements: 0 };
    for (m, h, c) in partial {
        report.max_deviation = report.max_deviation.max(m);
        report.disagreements += c;
        for (a, b) in report.histogram.iter_mut().zip(h) {
            *a += b;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::{forward_product, gen_factor_chain, ModelParams};

    #[test]
    fn identity_gives_empty_graph() {
        let g = rounded_gram(&DenseMatrix::identity(6), 1).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.margin(), 0.0);
        assert!(g.diag().unwrap().iter().all(|&v| v == 1.0));
        assert!(!g.ambiguous());
    }

    #[test]
    fn depth_one_is_exact() {
        let p = ModelParams::new(128, 6, 1, 3).unwrap();
        let x = &gen_factor_chain(&p)[0];
        let y = forward_product(std::slice::from_ref(x), p.d).unwrap();
        let g = rounded_gram(&y, p.d).unwrap();
        let truth = GramGraph::from_exact(x);
        assert!(g.margin() <= 1e-9);
        assert_eq!(g.edges().collect::<Vec<_>>(), truth.edges().collect::<Vec<_>>());
        for (a, b) in g.diag().unwrap().iter().zip(truth.diag().unwrap()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_are_symmetric() {
        let p = ModelParams::new(64, 4, 2, 9).unwrap();
        let y = forward_product(&gen_factor_chain(&p), p.d).unwrap();
        let g = rounded_gram(&y, p.d).unwrap();
        for (i, j, w) in g.edges() {
            assert_eq!(g.weight(j, i), w);
            assert_eq!(g.weight(i, j), w);
        }
        for i in 0..g.n() {
            assert_eq!(g.weight(i, i), 0);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut y = DenseMatrix::identity(3);
        y[(2, 1)] = f64::INFINITY;
        assert_eq!(rounded_gram(&y, 1), Err(GramError::NonFinite { row: 2, col: 1 }));
        assert!(rounded_gram(&DenseMatrix::zeros(2, 3), 1).is_err());
    }

    #[test]
    fn ambiguous_flag_threshold() {
        // Off-diagonal Gram entry 0.46 sits 0.46 from zero.
        let a = (0.46f64).sqrt();
        let y = DenseMatrix::from_row_major(2, 2, vec![a, 0.0, a, 0.0]).unwrap();
        let g = rounded_gram(&y, 1).unwrap();
        assert!((g.margin() - 0.46).abs() < 1e-12);
        assert!(g.ambiguous());
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn smf_dump_is_upper_triangle_sorted_by_column() {
        let g = GramGraph::from_edges(4, [(2, 0, 3), (1, 3, -1), (0, 1, 2)]);
        let mut buf = Vec::new();
        g.write_smf(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "SMF1 4 4 3\n0 1 2\n0 2 3\n1 3 -1\n");
        let side = serde_json::to_string(&g.sidecar()).unwrap();
        assert_eq!(side, r#"{"margin":0.0,"ambiguous":false}"#);
    }

    #[test]
    fn margin_report_exact_at_depth_one() {
        let p = ModelParams::new(96, 5, 1, 12).unwrap();
        let x = &gen_factor_chain(&p)[0];
        let y = forward_product(std::slice::from_ref(x), p.d).unwrap();
        let r = gram_margin(&y, p.d, x).unwrap();
        assert!(r.max_deviation <= 1e-9);
        assert_eq!(r.disagreements, 0);
        assert_eq!(r.histogram.iter().sum::<u64>(), (96 * 95 / 2) as u64);
    }

    #[test]
    fn margin_report_tracks_single_entry_perturbation() {
        let p = ModelParams::new(32, 4, 1, 5).unwrap();
        let x = &gen_factor_chain(&p)[0];
        let mut y = forward_product(std::slice::from_ref(x), p.d).unwrap();
        let delta = 0.3 / p.d as f64;
        y[(0, 1)] += delta;
        // Direct evaluation: only row 0 changes, so (0, j) moves by d * delta * Y[j, 1].
        let expected = (1..32)
            .map(|j| (p.d as f64 * delta * y[(j, 1)]).abs())
            .fold(0.0, f64::max);
        let r = gram_margin(&y, p.d, x).unwrap();
        assert!((r.max_deviation - expected).abs() < 1e-12);
        assert!(r.histogram[MarginReport::bin_of(expected)] >= 1);
    }
}
