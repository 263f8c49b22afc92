//! Reconstruction of a sparse factor `X` from its correlation graph `X X^T`.
//!
//! Every edge `(i, j)` of the graph proposes a hidden node. Its candidate
//! support starts as `{i, j}` plus the common neighbours of `i` and `j`, is
//! pruned by adjacency density, and then receives signs by a majority vote
//! and magnitudes by the mode of the sign-corrected correlations. Pairs whose
//! rows share exactly one column of `X` yield that column up to negation;
//! other pairs collapse below the support floor and are discarded. The pool
//! is then reconciled against the graph (see [`crate::reconcile`]).

use std::cmp::Reverse;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gram::GramGraph;
use crate::matrix::SparseIntMatrix;
use crate::reconcile::reconcile;

/// Smallest sparsity for which recovery thresholds are meaningful.
pub const MIN_SUPPORTED_D: usize = 8;

/// Fraction of a candidate above which tied sign votes mark it inconsistent.
const MAX_TIE_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecoveryError {
    #[error("nodes {i} and {j} are not adjacent")]
    NoEdge { i: usize, j: usize },
    #[error("{ties} of {size} sign votes tied")]
    Inconsistent { ties: usize, size: usize },
    #[error("node {node} has non-positive magnitude vote {mode}")]
    NonPositiveMode { node: usize, mode: i64 },
    #[error("recovery needs d >= {MIN_SUPPORTED_D}, got d = {d}")]
    Unsupported { d: usize },
    #[error("found {found} columns, expected {expected}; {unexplained} Gram entries unexplained")]
    IncompleteRecovery { found: usize, expected: usize, unexplained: usize },
    #[error("graph has {graph} nodes, expected {expected}")]
    OrderMismatch { graph: usize, expected: usize },
    #[error("invalid recovery config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    /// Adjacency fraction a node needs within the candidate to survive pruning.
    pub tau: f64,
    /// Net sign agreement, as a fraction of the pruned set, that brings an
    /// outside node into the candidate.
    pub tau_add: f64,
    /// Candidates with fewer than `min_support_factor * d` nodes are discarded.
    pub min_support_factor: f64,
    pub d: usize,
}

impl RecoveryConfig {
    pub const DEFAULT_TAU: f64 = 0.75;
    pub const DEFAULT_TAU_ADD: f64 = 0.65;
    pub const DEFAULT_MIN_SUPPORT_FACTOR: f64 = 0.25;

    pub fn new(d: usize) -> Self {
        Self {
            tau: Self::DEFAULT_TAU,
            tau_add: Self::DEFAULT_TAU_ADD,
            min_support_factor: Self::DEFAULT_MIN_SUPPORT_FACTOR,
            d,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<(), RecoveryError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(RecoveryError::InvalidConfig(format!("tau = {} not in (0, 1)", self.tau)));
        }
        if !(self.tau_add > 0.0 && self.tau_add <= 1.0) {
            return Err(RecoveryError::InvalidConfig(format!("tau_add = {} not in (0, 1]", self.tau_add)));
        }
        if !(self.min_support_factor >= 0.0 && self.min_support_factor.is_finite()) {
            return Err(RecoveryError::InvalidConfig(format!(
                "min_support_factor = {} must be finite and non-negative",
                self.min_support_factor
            )));
        }
        Ok(())
    }

    fn min_support(&self) -> f64 {
        (self.min_support_factor * self.d as f64).max(2.0)
    }
}

/// One hypothesised column of the factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateColumn {
    /// The identifying pair of output nodes, `pair.0 < pair.1`.
    pub pair: (usize, usize),
    /// Sorted node indices.
    pub support: Vec<usize>,
    /// `+1` or `-1` per support node; the first entry is always `+1`.
    pub sign: Vec<i8>,
    /// Positive magnitude per support node.
    pub magnitude: Vec<i64>,
}

impl CandidateColumn {
    pub fn values(&self) -> impl Iterator<Item = (usize, i64)> + '_ {
        self.support
            .iter()
            .zip(self.sign.iter().zip(&self.magnitude))
            .map(|(&k, (&s, &m))| (k, s as i64 * m))
    }

    /// Sort and dedupe key: support, then signed values.
    pub fn key(&self) -> (Vec<usize>, Vec<i64>) {
        (self.support.clone(), self.values().map(|(_, v)| v).collect())
    }
}

/// Size of the intersection of two sorted index sequences.
fn intersection_count(adj: &[(usize, i64)], set: &[usize]) -> usize {
    let (mut a, mut b, mut count) = (0, 0, 0);
    while a < adj.len() && b < set.len() {
        match adj[a].0.cmp(&set[b]) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                a += 1;
                b += 1;
            }
        }
    }
    count
}

/// `{i, j}` together with every node adjacent to both, sorted.
pub fn common_neighbors(g: &GramGraph, i: usize, j: usize) -> Result<Vec<usize>, RecoveryError> {
    if i == j || !g.adjacent(i, j) {
        return Err(RecoveryError::NoEdge { i, j });
    }
    let (ai, aj) = (g.neighbors(i), g.neighbors(j));
    let mut out = Vec::with_capacity(ai.len().min(aj.len()) + 2);
    let (mut a, mut b) = (0, 0);
    while a < ai.len() && b < aj.len() {
        match ai[a].0.cmp(&aj[b].0) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                out.push(ai[a].0);
                a += 1;
                b += 1;
            }
        }
    }
    out.push(i);
    out.push(j);
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Drop pass followed by one add pass.
///
/// Drop: while some member is adjacent to fewer than `tau * (|S| - 1)` other
/// members, remove the least connected one (ties: the largest index). Add:
/// with `S'` the survivors carrying provisional signs from [`assign_signs`],
/// include every outside node `k` with
/// `|sum_{m in S'} sign(m) sgn(w(k, m))| >= tau_add * |S'|`. The add pass is
/// skipped when `S'` admits no consistent signs. A lone survivor is dropped
/// too, and an empty `S'` stays empty.
pub fn prune_candidate(g: &GramGraph, s: &[usize], cfg: &RecoveryConfig) -> Vec<usize> {
    let mut set = s.to_vec();
    set.sort_unstable();
    set.dedup();
    // k is never its own neighbour, so this counts S \ {k}.
    let mut counts: Vec<usize> = set.iter().map(|&k| intersection_count(g.neighbors(k), &set)).collect();
    while let Some((pos, &c)) = counts.iter().enumerate().min_by_key(|&(p, &c)| (c, Reverse(p))) {
        if set.len() > 1 && c as f64 >= cfg.tau * (set.len() - 1) as f64 {
            break;
        }
        let gone = set.remove(pos);
        counts.remove(pos);
        for (k, count) in set.iter().zip(counts.iter_mut()) {
            if g.adjacent(*k, gone) {
                *count -= 1;
            }
        }
    }
    if set.is_empty() {
        return set;
    }
    let Ok(sign) = assign_signs(g, &set) else {
        return set;
    };

    let bar = cfg.tau_add * set.len() as f64;
    let mut votes: Vec<(usize, i64)> = set
        .iter()
        .zip(&sign)
        .flat_map(|(&m, &sm)| g.neighbors(m).iter().map(move |&(k, w)| (k, sm as i64 * w.signum())))
        .collect();
    votes.sort_unstable_by_key(|&(k, _)| k);
    let mut out = set.clone();
    for run in votes.chunk_by(|a, b| a.0 == b.0) {
        let node = run[0].0;
        let vote: i64 = run.iter().map(|&(_, v)| v).sum();
        if vote.unsigned_abs() as f64 >= bar && set.binary_search(&node).is_err() {
            out.push(node);
        }
    }
    out.sort_unstable();
    out
}

/// Signs of the support nodes, anchored so the smallest index is `+1`.
pub fn assign_signs(g: &GramGraph, s: &[usize]) -> Result<Vec<i8>, RecoveryError> {
    let Some(&anchor) = s.first() else {
        return Ok(Vec::new());
    };
    let initial: Vec<i8> = s
        .iter()
        .map(|&k| if g.weight(anchor, k) < 0 { -1 } else { 1 })
        .collect();

    let mut ties = 0;
    let mut corrected = Vec::with_capacity(s.len());
    for (a, &k) in s.iter().enumerate() {
        let vote: i64 = s
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(b, &m)| initial[b] as i64 * g.weight(k, m).signum())
            .sum();
        corrected.push(match vote.signum() {
            0 => {
                ties += 1;
                initial[a]
            }
            v => v as i8,
        });
    }
    if ties as f64 > MAX_TIE_FRACTION * s.len() as f64 {
        return Err(RecoveryError::Inconsistent { ties, size: s.len() });
    }
    if corrected[0] < 0 {
        corrected.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(corrected)
}

/// Most frequent value, ties broken toward the smallest.
pub fn mode_smallest(values: &mut [i64]) -> Option<i64> {
    values.sort_unstable();
    let mut best: Option<(usize, i64)> = None;
    let mut p = 0;
    while p < values.len() {
        let mut q = p;
        while q < values.len() && values[q] == values[p] {
            q += 1;
        }
        if best.is_none_or(|(c, _)| q - p > c) {
            best = Some((q - p, values[p]));
        }
        p = q;
    }
    best.map(|(_, v)| v)
}

/// Magnitude of each support node: the mode of
/// `sign(k) * sign(k') * w(k, k')` over adjacent `k'` in the support.
pub fn assign_magnitudes(g: &GramGraph, s: &[usize], sign: &[i8]) -> Result<Vec<i64>, RecoveryError> {
    assert_eq!(s.len(), sign.len());
    let mut votes = Vec::with_capacity(s.len());
    s.iter()
        .enumerate()
        .map(|(a, &k)| {
            votes.clear();
            votes.extend(s.iter().enumerate().filter(|&(b, _)| b != a).filter_map(|(b, &m)| {
                let w = g.weight(k, m);
                (w != 0).then(|| sign[a] as i64 * sign[b] as i64 * w)
            }));
            match mode_smallest(&mut votes) {
                Some(mode) if mode > 0 => Ok(mode),
                other => Err(RecoveryError::NonPositiveMode { node: k, mode: other.unwrap_or(0) }),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Pruned support smaller than `min_support_factor * d` (or 2).
    BelowMinSupport,
    /// Pruning removed one of the identifying nodes.
    PairPruned,
    Inconsistent,
    NonPositiveMode,
    Duplicate,
}

/// Per-edge outcome, for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub pair: (usize, usize),
    pub support_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropped_reason: Option<DropReason>,
}

fn build_candidate(
    g: &GramGraph,
    i: usize,
    j: usize,
    cfg: &RecoveryConfig,
) -> Result<CandidateColumn, (usize, DropReason)> {
    let s = common_neighbors(g, i, j).expect("(i, j) is an edge");
    let support = prune_candidate(g, &s, cfg);
    let size = support.len();
    if (size as f64) < cfg.min_support() {
        return Err((size, DropReason::BelowMinSupport));
    }
    if support.binary_search(&i).is_err() || support.binary_search(&j).is_err() {
        return Err((size, DropReason::PairPruned));
    }
    let sign = assign_signs(g, &support).map_err(|_| (size, DropReason::Inconsistent))?;
    let magnitude = assign_magnitudes(g, &support, &sign).map_err(|_| (size, DropReason::NonPositiveMode))?;
    Ok(CandidateColumn { pair: (i, j), support, sign, magnitude })
}

/// Candidates from every edge, deduplicated and in canonical key order,
/// together with a log entry per edge.
pub fn enumerate_candidates_logged(
    g: &GramGraph,
    cfg: &RecoveryConfig,
) -> (Vec<CandidateColumn>, Vec<CandidateLog>) {
    let edges: Vec<(usize, usize)> = g.edges().map(|(i, j, _)| (i, j)).collect();
    let outcomes: Vec<Result<CandidateColumn, (usize, DropReason)>> =
        edges.par_iter().map(|&(i, j)| build_candidate(g, i, j, cfg)).collect();

    let mut logs: Vec<CandidateLog> = edges
        .iter()
        .zip(&outcomes)
        .map(|(&pair, o)| match o {
            Ok(c) => CandidateLog { pair, support_size: c.support.len(), dropped_reason: None },
            Err((size, reason)) => CandidateLog { pair, support_size: *size, dropped_reason: Some(*reason) },
        })
        .collect();

    let mut found: Vec<(usize, CandidateColumn)> = outcomes
        .into_iter()
        .enumerate()
        .filter_map(|(e, o)| o.ok().map(|c| (e, c)))
        .collect();
    found.sort_by(|a, b| a.1.key().cmp(&b.1.key()).then(a.1.pair.cmp(&b.1.pair)));

    let mut out: Vec<CandidateColumn> = Vec::new();
    for (e, c) in found {
        match out.last() {
            Some(prev) if prev.support == c.support && prev.sign == c.sign && prev.magnitude == c.magnitude => {
                logs[e].dropped_reason = Some(DropReason::Duplicate);
            }
            _ => out.push(c),
        }
    }
    (out, logs)
}

pub fn enumerate_candidates(g: &GramGraph, cfg: &RecoveryConfig) -> Vec<CandidateColumn> {
    enumerate_candidates_logged(g, cfg).0
}

/// Assembles candidates as columns of an `n x n` matrix, in candidate order.
pub fn assemble(n: usize, candidates: &[CandidateColumn]) -> SparseIntMatrix {
    let columns = candidates.iter().map(|c| c.values().collect()).collect();
    SparseIntMatrix::from_columns(n, columns).expect("candidate rows are valid node indices")
}

/// Recovers the factor from its correlation graph, up to column order and
/// per-column sign. Columns are sorted by canonical key.
pub fn recover_factor(g: &GramGraph, n: usize, cfg: &RecoveryConfig) -> Result<SparseIntMatrix, RecoveryError> {
    recover_factor_logged(g, n, cfg).map(|(m, _)| m)
}

/// As [`recover_factor`], also returning the per-edge log of the first
/// candidate pass.
///
/// Succeeds only with exactly `n` columns whose rank-one terms reproduce the
/// graph's weights and, when the graph carries one, its rounded diagonal.
pub fn recover_factor_logged(
    g: &GramGraph,
    n: usize,
    cfg: &RecoveryConfig,
) -> Result<(SparseIntMatrix, Vec<CandidateLog>), RecoveryError> {
    cfg.validate()?;
    if cfg.d < MIN_SUPPORTED_D {
        return Err(RecoveryError::Unsupported { d: cfg.d });
    }
    if g.n() != n {
        return Err(RecoveryError::OrderMismatch { graph: g.n(), expected: n });
    }
    let r = reconcile(g, cfg);
    if r.columns.len() != n || r.unexplained != 0 {
        return Err(RecoveryError::IncompleteRecovery {
            found: r.columns.len(),
            expected: n,
            unexplained: r.unexplained,
        });
    }
    let m = SparseIntMatrix::from_columns(n, r.columns).expect("columns hold valid node indices");
    Ok((m, r.logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RecoveryConfig {
        RecoveryConfig::new(8)
    }

    fn clique(nodes: &[usize], w: i64) -> Vec<(usize, usize, i64)> {
        let mut e = Vec::new();
        for (a, &i) in nodes.iter().enumerate() {
            for &j in &nodes[a + 1..] {
                e.push((i, j, w));
            }
        }
        e
    }

    #[test]
    fn common_neighbors_of_triangle() {
        let g = GramGraph::from_edges(3, [(0, 1, 1), (0, 2, 1), (1, 2, 1)]);
        assert_eq!(common_neighbors(&g, 0, 1).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn common_neighbors_of_star() {
        let g = GramGraph::from_edges(4, [(0, 1, 1), (0, 2, 1), (0, 3, 1)]);
        assert_eq!(common_neighbors(&g, 0, 1).unwrap(), vec![0, 1]);
        assert_eq!(common_neighbors(&g, 1, 2), Err(RecoveryError::NoEdge { i: 1, j: 2 }));
        assert_eq!(common_neighbors(&g, 1, 1), Err(RecoveryError::NoEdge { i: 1, j: 1 }));
    }

    #[test]
    fn prune_keeps_a_clique() {
        let g = GramGraph::from_edges(12, clique(&[1, 3, 4, 7, 9], 1));
        assert_eq!(prune_candidate(&g, &[1, 3, 4, 7, 9], &cfg()), vec![1, 3, 4, 7, 9]);
    }

    #[test]
    fn prune_drops_weakly_attached_node() {
        let members: Vec<usize> = (0..9).collect();
        let mut edges = clique(&members, 1);
        edges.push((9, 0, 1));
        let g = GramGraph::from_edges(10, edges);
        let s: Vec<usize> = (0..10).collect();
        assert_eq!(prune_candidate(&g, &s, &cfg()), members);
    }

    #[test]
    fn prune_adds_strongly_attached_outsider() {
        let members: Vec<usize> = (0..6).collect();
        let mut edges = clique(&members, 1);
        edges.extend((0..4).map(|k| (6, k, 1)));
        edges.push((7, 0, 1));
        let g = GramGraph::from_edges(8, edges);
        assert_eq!(prune_candidate(&g, &members, &cfg()), vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn prune_of_isolated_set_is_empty() {
        let g = GramGraph::from_edges(5, [(3, 4, 1)]);
        assert!(prune_candidate(&g, &[0, 1, 2], &cfg()).is_empty());
    }

    #[test]
    fn signs_all_positive() {
        let g = GramGraph::from_edges(3, [(0, 1, 1), (0, 2, 1), (1, 2, 1)]);
        assert_eq!(assign_signs(&g, &[0, 1, 2]).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn signs_two_coloring() {
        let g = GramGraph::from_edges(3, [(0, 1, -1), (0, 2, -1), (1, 2, 1)]);
        assert_eq!(assign_signs(&g, &[0, 1, 2]).unwrap(), vec![1, -1, -1]);
    }

    #[test]
    fn sign_correction_fixes_a_missing_anchor_edge() {
        // Column signs (+, -, +, -, +); the anchor edge (0, 3) is missing.
        let sg = [1i64, -1, 1, -1, 1];
        let mut edges = Vec::new();
        for a in 0..5 {
            for b in a + 1..5 {
                if (a, b) != (0, 3) {
                    edges.push((a, b, sg[a] * sg[b]));
                }
            }
        }
        let g = GramGraph::from_edges(5, edges);
        assert_eq!(assign_signs(&g, &[0, 1, 2, 3, 4]).unwrap(), vec![1, -1, 1, -1, 1]);
    }

    #[test]
    fn tied_votes_are_inconsistent() {
        // Path 0-1-2 plus isolated 3: node 3 has no votes, 0 and 2 tie.
        let g = GramGraph::from_edges(4, [(0, 1, 1), (1, 2, -1)]);
        assert!(matches!(assign_signs(&g, &[0, 1, 2, 3]), Err(RecoveryError::Inconsistent { .. })));
    }

    #[test]
    fn mode_examples() {
        assert_eq!(mode_smallest(&mut [1, 1, 1, 2]), Some(1));
        assert_eq!(mode_smallest(&mut [2, 2, 1]), Some(2));
        assert_eq!(mode_smallest(&mut [3, 1, 3, 1]), Some(1));
        assert_eq!(mode_smallest(&mut []), None);
    }

    #[test]
    fn magnitudes_pick_the_collision() {
        // Column values (2, 1, -1, 1): correlations are products of entries.
        let col = [2i64, 1, -1, 1];
        let mut edges = Vec::new();
        for a in 0..4 {
            for b in a + 1..4 {
                edges.push((a, b, col[a] * col[b]));
            }
        }
        let g = GramGraph::from_edges(4, edges);
        let s = [0, 1, 2, 3];
        let sign = assign_signs(&g, &s).unwrap();
        assert_eq!(sign, vec![1, 1, -1, 1]);
        assert_eq!(assign_magnitudes(&g, &s, &sign).unwrap(), vec![2, 1, 1, 1]);
    }

    #[test]
    fn magnitudes_reject_sign_failure() {
        let g = GramGraph::from_edges(2, [(0, 1, -1)]);
        let err = assign_magnitudes(&g, &[0, 1], &[1, 1]).unwrap_err();
        assert_eq!(err, RecoveryError::NonPositiveMode { node: 0, mode: -1 });
    }

    #[test]
    fn empty_graph_has_no_candidates() {
        let g = GramGraph::from_edges(10, []);
        assert!(enumerate_candidates(&g, &cfg()).is_empty());
    }

    #[test]
    fn single_candidate_reassembly() {
        // One column with support {1, 2, 4, 5} and values (1, -1, 2, 1).
        let col = [(1usize, 1i64), (2, -1), (4, 2), (5, 1)];
        let mut edges = Vec::new();
        for a in 0..4 {
            for b in a + 1..4 {
                edges.push((col[a].0, col[b].0, col[a].1 * col[b].1));
            }
        }
        let g = GramGraph::from_edges(6, edges);
        let c = RecoveryConfig::new(8);
        let cands = enumerate_candidates(&g, &c);
        assert_eq!(cands.len(), 1);
        let m = assemble(6, &cands);
        assert_eq!(m.column_entries(0).collect::<Vec<_>>(), col.to_vec());
        assert_eq!(
            recover_factor(&g, 6, &c),
            Err(RecoveryError::IncompleteRecovery { found: 1, expected: 6, unexplained: 0 })
        );
    }

    #[test]
    fn small_d_is_unsupported() {
        let g = GramGraph::from_edges(4, []);
        assert_eq!(
            recover_factor(&g, 4, &RecoveryConfig::new(4)),
            Err(RecoveryError::Unsupported { d: 4 })
        );
    }

    #[test]
    fn config_validation() {
        assert!(RecoveryConfig::new(8).with_tau(0.0).validate().is_err());
        assert!(RecoveryConfig::new(8).with_tau(1.0).validate().is_err());
        assert!(RecoveryConfig::new(8).validate().is_ok());
        assert!(RecoveryConfig { tau_add: 0.0, ..RecoveryConfig::new(8) }.validate().is_err());
    }
}
