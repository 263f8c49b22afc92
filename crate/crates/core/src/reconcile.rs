//! Choosing a consistent set of columns from the candidate pool.
//!
//! Away from the asymptotic regime the pool holds near misses next to the
//! true columns: a column that lost a node to a cancelled correlation, or one
//! that picked up a well connected outsider. The pool is reconciled against
//! the graph itself. Columns are accepted greedily into the residual
//! `G - sum_c c c^T`, a local search then edits single entries while that
//! lowers the residual, and fresh candidates are drawn from what remains.
//! The result is trusted only when the residual vanishes, i.e. when the
//! accepted columns reproduce every known entry of the Gram matrix.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use crate::gram::GramGraph;
use crate::recovery::{enumerate_candidates_logged, CandidateLog, RecoveryConfig};

/// Sparse column as `(row, value)` pairs sorted by row.
pub type Column = Vec<(usize, i64)>;

type ColumnKey = (Vec<usize>, Vec<i64>);

/// Acceptance tiers: the largest fraction of pairs a column may leave worse.
const WORSENED_TIERS: [f64; 2] = [0.0, 0.1];
/// Smallest fraction of pairs an accepted column must improve.
const MIN_IMPROVED: f64 = 0.75;
const MAX_ROUNDS: usize = 64;
const MAX_RESTARTS: usize = 8;
const MAX_ENTRY: i64 = 3;
/// Give up when the first greedy pass leaves more than this fraction of the
/// graph unexplained; the graph is then not a sum of sparse rank-one terms.
const HOPELESS_FRACTION: f64 = 0.5;

/// Orientation-free key: support, then values with a positive first entry.
pub fn canonical_key(col: &[(usize, i64)]) -> ColumnKey {
    let flip = if col.first().is_some_and(|&(_, v)| v < 0) { -1 } else { 1 };
    (col.iter().map(|&(k, _)| k).collect(), col.iter().map(|&(_, v)| v * flip).collect())
}

/// `G - sum_c c c^T`, off the diagonal and (when known) on it.
struct Residual {
    off: Vec<HashMap<usize, i64>>,
    diag: Option<Vec<i64>>,
}

impl Residual {
    fn new(g: &GramGraph) -> Self {
        let off = (0..g.n()).map(|i| g.neighbors(i).iter().copied().collect()).collect();
        let diag = g.diag().map(|d| d.iter().map(|v| v.round() as i64).collect());
        Self { off, diag }
    }

    fn get(&self, i: usize, j: usize) -> i64 {
        self.off[i].get(&j).copied().unwrap_or(0)
    }

    fn add(&mut self, i: usize, j: usize, delta: i64) {
        for (a, b) in [(i, j), (j, i)] {
            let e = self.off[a].entry(b).or_insert(0);
            *e += delta;
            if *e == 0 {
                self.off[a].remove(&b);
            }
        }
    }

    fn diag_at(&self, k: usize) -> Option<i64> {
        self.diag.as_ref().map(|d| d[k])
    }

    /// Subtracts `factor * c c^T`.
    fn apply(&mut self, col: &[(usize, i64)], factor: i64) {
        for (a, &(i, vi)) in col.iter().enumerate() {
            if let Some(d) = &mut self.diag {
                d[i] -= factor * vi * vi;
            }
            for &(j, vj) in &col[a + 1..] {
                self.add(i, j, -factor * vi * vj);
            }
        }
    }

    fn graph(&self) -> GramGraph {
        let n = self.off.len();
        GramGraph::from_edges(
            n,
            self.off
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().filter(move |(&j, _)| j > i).map(move |(&j, &w)| (i, j, w))),
        )
    }

    fn is_hot(&self, k: usize) -> bool {
        !self.off[k].is_empty() || self.diag_at(k).is_some_and(|v| v != 0)
    }

    fn unexplained(&self) -> usize {
        let edges = self.off.iter().map(HashMap::len).sum::<usize>() / 2;
        edges + self.diag.as_ref().map_or(0, |d| d.iter().filter(|&&v| v != 0).count())
    }

    /// Change in the residual's L1 norm if entry `k` of `col` became `v`.
    fn entry_delta(&self, col: &[(usize, i64)], k: usize, v: i64) -> i64 {
        let old = col.iter().find(|e| e.0 == k).map_or(0, |e| e.1);
        let mut delta = 0;
        if let Some(r) = self.diag_at(k) {
            delta += (r - (v * v - old * old)).abs() - r.abs();
        }
        for &(m, cm) in col {
            if m != k {
                let w = self.get(k, m);
                delta += (w - (v - old) * cm).abs() - w.abs();
            }
        }
        delta
    }

    /// Change in the residual's L1 norm if `col` were removed.
    fn removal_delta(&self, col: &[(usize, i64)]) -> i64 {
        let mut delta = 0;
        for (a, &(i, vi)) in col.iter().enumerate() {
            if let Some(r) = self.diag_at(i) {
                delta += (r + vi * vi).abs() - r.abs();
            }
            for &(j, vj) in &col[a + 1..] {
                let w = self.get(i, j);
                delta += (w + vi * vj).abs() - w.abs();
            }
        }
        delta
    }
}

struct Fit {
    net: i64,
    improved: usize,
    worsened: usize,
    pairs: usize,
}

/// Counts the pairs of `col` whose residual entry shrinks or not on
/// subtracting `c c^T`.
fn fit(res: &Residual, col: &[(usize, i64)]) -> Fit {
    let (mut improved, mut worsened) = (0, 0);
    for (a, &(i, vi)) in col.iter().enumerate() {
        for &(j, vj) in &col[a + 1..] {
            let w = res.get(i, j);
            if (w - vi * vj).abs() < w.abs() {
                improved += 1;
            } else {
                worsened += 1;
            }
        }
    }
    Fit { net: improved as i64 - worsened as i64, improved, worsened, pairs: improved + worsened }
}

fn diag_room(res: &Residual, col: &[(usize, i64)]) -> bool {
    col.iter().all(|&(k, v)| res.diag_at(k).is_none_or(|r| r >= v * v))
}

/// Lazy greedy by net fit, strictest tier first.
fn accept(res: &mut Residual, pool: &[Column], out: &mut Vec<Column>) -> usize {
    let mut used = vec![false; pool.len()];
    let mut count = 0;
    for tier in WORSENED_TIERS {
        let mut heap: BinaryHeap<(i64, Reverse<usize>)> = pool
            .iter()
            .enumerate()
            .filter(|&(p, _)| !used[p])
            .map(|(p, c)| (fit(res, c).net, Reverse(p)))
            .collect();
        while let Some((stored, Reverse(p))) = heap.pop() {
            let f = fit(res, &pool[p]);
            if f.net < stored {
                heap.push((f.net, Reverse(p)));
                continue;
            }
            let ok = f.worsened as f64 <= tier * f.pairs as f64
                && f.improved as f64 >= MIN_IMPROVED * f.pairs as f64
                && diag_room(res, &pool[p]);
            if ok {
                res.apply(&pool[p], 1);
                out.push(pool[p].clone());
                used[p] = true;
                count += 1;
            }
        }
    }
    count
}

enum Move {
    Remove,
    Set(usize, i64),
}

/// Single-entry edits and removals that strictly lower the residual, until
/// none is left. Edits that would recreate a banned column are skipped.
fn repair(res: &mut Residual, cols: &mut Vec<Column>, banned: &HashSet<ColumnKey>) -> usize {
    let mut moves = 0;
    loop {
        let mut changed = false;
        let mut c = 0;
        while c < cols.len() {
            let col = &cols[c];
            let mut best: Option<(i64, Move)> = None;
            let remove = res.removal_delta(col);
            if remove < 0 {
                best = Some((remove, Move::Remove));
            }
            let mut nodes: Vec<usize> =
                col.iter().flat_map(|&(k, _)| res.off[k].keys().copied().chain([k])).collect();
            nodes.sort_unstable();
            nodes.dedup();
            for k in nodes {
                let old = col.iter().find(|e| e.0 == k).map_or(0, |e| e.1);
                for v in -MAX_ENTRY..=MAX_ENTRY {
                    if v == old {
                        continue;
                    }
                    let delta = res.entry_delta(col, k, v);
                    if delta < best.as_ref().map_or(0, |b| b.0) && !banned.contains(&canonical_key(&with_entry(col, k, v)))
                    {
                        best = Some((delta, Move::Set(k, v)));
                    }
                }
            }
            match best {
                None => c += 1,
                Some((_, Move::Remove)) => {
                    let col = cols.swap_remove(c);
                    res.apply(&col, -1);
                    moves += 1;
                    changed = true;
                }
                Some((_, Move::Set(k, v))) => {
                    let old = cols[c].clone();
                    res.apply(&old, -1);
                    cols[c] = with_entry(&old, k, v);
                    res.apply(&cols[c], 1);
                    if cols[c].is_empty() {
                        cols.swap_remove(c);
                    } else {
                        c += 1;
                    }
                    moves += 1;
                    changed = true;
                }
            }
        }
        if !changed {
            return moves;
        }
    }
}

fn with_entry(col: &[(usize, i64)], k: usize, v: i64) -> Column {
    let mut out: Column = col.iter().copied().filter(|e| e.0 != k).collect();
    if v != 0 {
        let p = out.partition_point(|e| e.0 < k);
        out.insert(p, (k, v));
    }
    out
}

/// Columns with a single non-zero show up only on the diagonal.
fn add_singletons(res: &mut Residual, cols: &mut Vec<Column>) -> usize {
    let Some(diag) = res.diag.clone() else { return 0 };
    let mut added = 0;
    for (k, &r) in diag.iter().enumerate() {
        if r > 0 && res.off[k].is_empty() {
            let root = (r as f64).sqrt().round() as i64;
            if root * root == r {
                let col = vec![(k, root)];
                res.apply(&col, 1);
                cols.push(col);
                added += 1;
            }
        }
    }
    added
}

/// Outcome of [`reconcile`].
#[derive(Clone, Debug, PartialEq)]
pub struct Reconciliation {
    /// Accepted columns, each sorted by row and oriented with a positive
    /// first entry, in canonical key order.
    pub columns: Vec<Column>,
    /// Residual edges plus residual diagonal entries left unexplained.
    pub unexplained: usize,
    pub rounds: usize,
    pub restarts: usize,
    /// Per-edge log of the first candidate pass.
    pub logs: Vec<CandidateLog>,
}

/// Builds a column set whose rank-one terms sum to `g`.
///
/// Stops early when the first greedy pass explains less than half of the
/// graph. When progress stalls with a residual left, the column touching the
/// most residual mass is banned, every column touching a residual node is
/// returned to the residual, and the search resumes from there.
pub fn reconcile(g: &GramGraph, cfg: &RecoveryConfig) -> Reconciliation {
    let mut res = Residual::new(g);
    let initial = res.unexplained();
    let mut cols: Vec<Column> = Vec::new();
    let mut banned: HashSet<ColumnKey> = HashSet::new();
    let mut logs = Vec::new();
    let (mut rounds, mut restarts) = (0, 0);
    while rounds < MAX_ROUNDS {
        rounds += 1;
        let (pool, l) = if rounds == 1 {
            enumerate_candidates_logged(g, cfg)
        } else {
            enumerate_candidates_logged(&res.graph(), cfg)
        };
        if rounds == 1 {
            logs = l;
        }
        let pool: Vec<Column> = pool
            .iter()
            .map(|c| c.values().collect::<Column>())
            .filter(|c| !banned.contains(&canonical_key(c)))
            .collect();
        let accepted = accept(&mut res, &pool, &mut cols);
        if rounds == 1 && res.unexplained() as f64 > HOPELESS_FRACTION * initial as f64 {
            break;
        }
        let progress = accepted + repair(&mut res, &mut cols, &banned);
        if progress > 0 || add_singletons(&mut res, &mut cols) > 0 {
            continue;
        }
        if res.unexplained() == 0 || restarts == MAX_RESTARTS {
            break;
        }
        restarts += 1;
        let contact = |col: &Column| -> usize {
            col.iter()
                .map(|&(k, _)| {
                    col.iter().filter(|&&(m, _)| res.off[k].contains_key(&m)).count()
                        + usize::from(res.diag_at(k).is_some_and(|v| v != 0))
                })
                .sum()
        };
        if let Some(worst) = cols.iter().enumerate().max_by_key(|&(p, c)| (contact(c), Reverse(p))) {
            banned.insert(canonical_key(worst.1));
        }
        let hot: Vec<bool> = (0..res.off.len()).map(|k| res.is_hot(k)).collect();
        let (freed, kept): (Vec<Column>, Vec<Column>) =
            cols.into_iter().partition(|c| c.iter().any(|&(k, _)| hot[k]));
        for c in &freed {
            res.apply(c, -1);
        }
        cols = kept;
    }
    let mut columns: Vec<Column> = cols
        .into_iter()
        .map(|c| {
            let (rows, vals) = canonical_key(&c);
            rows.into_iter().zip(vals).collect()
        })
        .collect();
    columns.sort_by_key(|c| canonical_key(c));
    Reconciliation { columns, unexplained: res.unexplained(), rounds, restarts, logs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::SparseIntMatrix;

    fn graph_of(cols: &[Column], n: usize) -> GramGraph {
        let x = SparseIntMatrix::from_columns(n, cols.to_vec()).unwrap();
        GramGraph::from_exact(&x)
    }

    #[test]
    fn key_ignores_orientation() {
        assert_eq!(canonical_key(&[(1, -1), (4, 2)]), canonical_key(&[(1, 1), (4, -2)]));
    }

    #[test]
    fn entry_edits() {
        let c = vec![(1, 1), (5, -1)];
        assert_eq!(with_entry(&c, 3, 2), vec![(1, 1), (3, 2), (5, -1)]);
        assert_eq!(with_entry(&c, 1, 0), vec![(5, -1)]);
        assert_eq!(with_entry(&c, 5, 1), vec![(1, 1), (5, 1)]);
    }

    #[test]
    fn residual_of_own_column_vanishes() {
        let col: Column = vec![(0, 1), (2, -1), (3, 2)];
        let g = graph_of(std::slice::from_ref(&col), 4);
        let mut res = Residual::new(&g);
        assert_eq!(res.unexplained(), 6);
        let f = fit(&res, &col);
        assert_eq!((f.improved, f.worsened), (3, 0));
        res.apply(&col, 1);
        assert_eq!(res.unexplained(), 0);
        assert_eq!(res.removal_delta(&col), 5 + 6);
    }

    #[test]
    fn repair_completes_a_truncated_column() {
        let truth: Column = vec![(0, 1), (1, 1), (2, -1), (3, 1), (4, 1)];
        let g = graph_of(std::slice::from_ref(&truth), 6);
        let mut res = Residual::new(&g);
        let mut cols = vec![truth[..4].to_vec()];
        res.apply(&cols[0], 1);
        assert!(repair(&mut res, &mut cols, &HashSet::new()) > 0);
        assert_eq!(cols, vec![truth]);
        assert_eq!(res.unexplained(), 0);
    }

    #[test]
    fn singleton_recovered_from_diagonal() {
        let cols: Vec<Column> = vec![vec![(0, 1), (1, 1), (2, 1)], vec![(3, -2)]];
        let g = graph_of(&cols, 4);
        let r = reconcile(&g, &RecoveryConfig::new(8));
        assert_eq!(r.unexplained, 0);
        assert_eq!(r.columns, vec![vec![(0, 1), (1, 1), (2, 1)], vec![(3, 2)]]);
    }

    #[test]
    fn overlapping_columns_are_separated() {
        let cols: Vec<Column> = vec![
            vec![(0, 1), (1, 1), (2, 1), (3, -1), (4, 1)],
            vec![(3, 1), (5, 1), (6, -1), (7, 1), (8, 1)],
            vec![(9, 1), (10, 1), (11, 1), (12, 1), (13, -1)],
        ];
        let g = graph_of(&cols, 14);
        let r = reconcile(&g, &RecoveryConfig::new(8));
        assert_eq!(r.unexplained, 0);
        let mut want: Vec<Column> =
            cols.iter().map(|c| { let (k, v) = canonical_key(c); k.into_iter().zip(v).collect() }).collect();
        want.sort_by_key(|c| canonical_key(c));
        assert_eq!(r.columns, want);
    }
}
