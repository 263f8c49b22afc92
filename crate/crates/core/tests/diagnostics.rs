use sparsefac::diagnostics::{
    cross_correlation_estimate, diagonal_concentration, entry_growth_profile, Pairing, TheoryScale,
};
use sparsefac::genmodel::ModelParams;

#[test]
fn support_grows_by_about_d_per_layer() {
    let (n, d) = (1024, 6);
    let p = ModelParams::new(n, d, 3, 11).unwrap();
    let profile = entry_growth_profile(&p, 100, TheoryScale::DEFAULT_C);
    assert!(profile.layers[0].nnz_mean <= d as f64);
    let mut checked = 0;
    for w in profile.layers.windows(2) {
        // Past a quarter of the rows, collisions bend the growth curve.
        if w[1].nnz_mean > n as f64 / 4.0 {
            break;
        }
        let ratio = w[1].nnz_mean / w[0].nnz_mean;
        assert!(ratio >= d as f64 / 2.0 && ratio <= 2.0 * d as f64, "layer {}: ratio {ratio}", w[1].layer);
        checked += 1;
    }
    assert!(checked >= 2);
    for l in &profile.layers {
        assert!(l.nnz_max <= n && l.m2.is_finite() && l.m4.is_finite());
        println!("{}", l.csv_row());
    }
}

#[test]
fn deep_diagonal_stays_near_one() {
    let p = ModelParams::new(1024, 6, 3, 2).unwrap();
    let stats = diagonal_concentration(&p, 20);
    assert!(stats.rows_used + stats.rows_skipped == 20 * 1024);
    assert!(stats.max_deviation.is_finite());
    println!("mean {:.4}, max deviation {:.4}", stats.mean_ratio, stats.max_deviation);
}

#[test]
fn self_pairing_is_far_from_zero() {
    let p = ModelParams::new(1024, 8, 1, 3).unwrap();
    let same = cross_correlation_estimate(&p, 50, Pairing::Identical);
    let disjoint = cross_correlation_estimate(&p, 50, Pairing::Disjoint);
    assert!(same.z_score() > 20.0);
    assert!(disjoint.estimate.abs() < same.estimate / 10.0);
}

#[test]
fn deeper_cross_moment_is_recorded() {
    let p = ModelParams::new(1024, 8, 3, 5).unwrap();
    let est = cross_correlation_estimate(&p, 200, Pairing::Disjoint);
    assert_eq!((est.layer, est.trials), (3, 200));
    assert!(est.estimate.is_finite() && est.std_error > 0.0);
    assert_eq!(est, cross_correlation_estimate(&p, 200, Pairing::Disjoint));
}
