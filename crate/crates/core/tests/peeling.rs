use sparsefac::equiv::{match_chain, reconstruction_error};
use sparsefac::genmodel::{forward_product, gen_factor_chain, gen_layer, ModelParams};
use sparsefac::peeling::{factorize_chain, solve_layer, LayerStatus, DEFAULT_KAPPA_MAX};
use sparsefac::recovery::RecoveryConfig;
use sparsefac::rng::{mix64, SplitMix64, AUX_LAYER_BASE};
use sparsefac::{DenseMatrix, SparseIntMatrix};

fn max_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn true_first_factor_exposes_the_second() {
    let (n, d) = (256, 8);
    let mut solved = 0;
    for seed in 0..6 {
        let xs = gen_factor_chain(&ModelParams::new(n, d, 2, seed).unwrap());
        let y = forward_product(&xs, d).unwrap();
        let Ok(res) = solve_layer(&xs[0], &y, d, 1e6) else {
            continue;
        };
        let want = xs[1].to_dense().scaled(1.0 / (d as f64).sqrt());
        assert!(max_diff(&res.peeled, &want) <= 1e-9, "seed {seed}");
        assert!(res.residual <= 1e-10, "seed {seed}: residual {}", res.residual);
        solved += 1;
    }
    assert!(solved >= 3);
}

#[test]
fn column_symmetry_moves_to_the_rows_of_the_remainder() {
    let (n, d) = (64, 8);
    let mut tested = 0;
    for seed in 0..10 {
        let xs = gen_factor_chain(&ModelParams::new(n, d, 3, seed).unwrap());
        let y = forward_product(&xs, d).unwrap();
        let mut rng = SplitMix64::new(mix64(seed, AUX_LAYER_BASE + 5, 0));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let flips: Vec<i64> = (0..n).map(|_| if rng.next_u64() & 1 == 0 { 1 } else { -1 }).collect();
        // Column j of the recovered factor is flips[j] times column perm[j].
        let xhat = SparseIntMatrix::from_triplets(
            n,
            n,
            (0..n).flat_map(|j| xs[0].column_entries(perm[j]).map(move |(r, v)| (r, j, v))).map(|(r, j, v)| (r, j, v * flips[j])),
        )
        .unwrap();
        let Ok(res) = solve_layer(&xhat, &y, d, DEFAULT_KAPPA_MAX) else {
            continue;
        };
        let rest = forward_product(&xs[1..], d).unwrap();
        let want = DenseMatrix::from_fn(n, n, |j, c| flips[j] as f64 * rest.row(perm[j])[c]);
        assert!(max_diff(&res.peeled, &want) <= 1e-9, "seed {seed}");
        tested += 1;
    }
    assert!(tested >= 5);
}

#[test]
fn exact_chain_factorizes_end_to_end() {
    // A scaled signed permutation as the second factor keeps d Y Y^T
    // integral, so every layer is recoverable.
    let (n, d) = (512, 9);
    let x1 = gen_layer(n, d, 4, 0);
    let mut rng = SplitMix64::new(mix64(4, AUX_LAYER_BASE + 6, 0));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.below(i + 1));
    }
    let x2 = SparseIntMatrix::from_triplets(
        n,
        n,
        perm.iter().enumerate().map(|(j, &r)| (r, j, if rng.next_u64() & 1 == 0 { 3 } else { -3 })),
    )
    .unwrap();
    let truth = vec![x1, x2];
    let y = forward_product(&truth, d).unwrap();
    let (factors, report) = factorize_chain(&y, n, d, 2, &RecoveryConfig::new(d), DEFAULT_KAPPA_MAX).unwrap();
    let statuses: Vec<LayerStatus> = report.layers.iter().map(|l| l.status).collect();
    if report.all_ok() {
        assert!(reconstruction_error(&factors, &y, d).unwrap() <= 1e-8);
        assert!(report.reconstruction_error.unwrap() <= 1e-8);
        assert!(match_chain(&factors, &truth).unwrap().iter().all(|m| m.matched));
    } else {
        assert!(statuses.iter().any(|s| *s != LayerStatus::Ok));
        panic!("exact chain not recovered: {statuses:?} {:?}", report.layers[0].detail);
    }
}
