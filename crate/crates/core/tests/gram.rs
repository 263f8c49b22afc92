use std::collections::BTreeMap;

use proptest::prelude::*;
use sparsefac::genmodel::{forward_product, gen_factor_chain, ModelParams};
use sparsefac::gram::{gram_margin, rounded_gram};
use sparsefac::SparseIntMatrix;

/// Off-diagonal `x x^T` by summing over every row pair.
fn offdiag_oracle(n: usize, x: &SparseIntMatrix) -> BTreeMap<(usize, usize), i64> {
    let dense: Vec<Vec<i64>> = (0..n).map(|i| (0..x.cols()).map(|j| x.get(i, j)).collect()).collect();
    let mut out = BTreeMap::new();
    for i in 0..n {
        for j in i + 1..n {
            let v: i64 = dense[i].iter().zip(&dense[j]).map(|(a, b)| a * b).sum();
            if v != 0 {
                out.insert((i, j), v);
            }
        }
    }
    out
}

fn upper_edges(g: &sparsefac::GramGraph) -> BTreeMap<(usize, usize), i64> {
    g.edges().filter(|&(i, j, _)| i < j).map(|(i, j, w)| ((i, j), w)).collect()
}

fn int_matrix(n: usize) -> impl Strategy<Value = SparseIntMatrix> {
    prop::collection::vec(-3i64..=3, n * n).prop_map(move |vals| {
        let triplets = vals.into_iter().enumerate().map(|(k, v)| (k / n, k % n, v)).filter(|t| t.2 != 0);
        SparseIntMatrix::from_triplets(n, n, triplets).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_recovers_integer_gram(
        x in (2usize..=24).prop_flat_map(int_matrix),
        d in 1usize..=32,
    ) {
        let n = x.rows();
        let y = forward_product(std::slice::from_ref(&x), d).unwrap();
        let g = rounded_gram(&y, d).unwrap();
        prop_assert_eq!(upper_edges(&g), offdiag_oracle(n, &x));
        prop_assert!(g.margin() <= 1e-9);
    }
}

#[test]
fn scale_recovers_integer_gram_at_n64() {
    let n = 64;
    let mut state = 17u64;
    let triplets: Vec<(usize, usize, i64)> = (0..n * n)
        .filter_map(|k| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ((state >> 33) % 7) as i64 - 3;
            (v != 0 && (state >> 20) % 5 == 0).then_some((k / n, k % n, v))
        })
        .collect();
    let x = SparseIntMatrix::from_triplets(n, n, triplets).unwrap();
    for d in [1, 5, 32] {
        let y = forward_product(std::slice::from_ref(&x), d).unwrap();
        let g = rounded_gram(&y, d).unwrap();
        assert_eq!(upper_edges(&g), offdiag_oracle(n, &x));
    }
}

#[test]
fn depth_one_is_exact_across_sizes() {
    for (n, d, seed) in [(64, 8, 1), (300, 12, 2), (1024, 8, 3), (128, 32, 4)] {
        let xs = gen_factor_chain(&ModelParams::new(n, d, 1, seed).unwrap());
        let y = forward_product(&xs, d).unwrap();
        let g = rounded_gram(&y, d).unwrap();
        assert!(g.margin() <= 1e-9, "n {n}: margin {}", g.margin());
        assert_eq!(upper_edges(&g), offdiag_oracle(n, &xs[0]));
        let diag = g.diag().unwrap();
        for (i, want) in xs[0].row_norms_sq().into_iter().enumerate() {
            assert!((diag[i] - want as f64).abs() <= 1e-9);
        }
    }
}

#[test]
fn deeper_margins_are_recorded() {
    for seed in 0..5 {
        let xs = gen_factor_chain(&ModelParams::new(512, 6, 3, seed).unwrap());
        let y = forward_product(&xs, 6).unwrap();
        let report = gram_margin(&y, 6, &xs[0]).unwrap();
        let pairs = 512 * 511 / 2;
        assert_eq!(report.histogram.iter().sum::<u64>(), pairs);
        assert!(report.max_deviation.is_finite() && report.max_deviation > 0.0);
        println!("seed {seed}: max deviation {:.3}, {} wrong", report.max_deviation, report.disagreements);
    }
}
