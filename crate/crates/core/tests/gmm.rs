mod common;

use common::*;
use mslds::estep::estep;
use mslds::gmm::{gmm_em, init_model, kmeanspp_seed, pool_frames, GmmConfig};
use mslds::{check_stability, Trajectory};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn blobs(seed: u64, n: usize, centers: &[f64]) -> DMatrix<f64> {
    let mut r = rng(seed);
    DMatrix::from_fn(n, 1, |i, _| centers[i % centers.len()] + normal(&mut r))
}

#[test]
fn separated_blobs_are_recovered() {
    let data = blobs(41, 2000, &[-5.0, 5.0]);
    let fit = gmm_em(&data, 2, 0, &GmmConfig::default()).unwrap();
    let mut comps: Vec<(f64, f64)> = fit.gaussians.iter().map(|g| (g.mu()[0], g.sigma()[(0, 0)])).collect();
    comps.sort_by(|a, b| a.0.total_cmp(&b.0));
    // 1000 unit-variance draws per blob: mean s.e. 0.03, variance s.e. 0.045
    assert!((comps[0].0 + 5.0).abs() <= 0.1 && (comps[1].0 - 5.0).abs() <= 0.1, "{comps:?}");
    assert!((comps[0].1 - 1.0).abs() <= 0.2 && (comps[1].1 - 1.0).abs() <= 0.2, "{comps:?}");
    assert!((fit.weights.sum() - 1.0).abs() <= 1e-12);
    for row in fit.responsibilities.row_iter() {
        assert!((row.sum() - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn seeding_puts_one_centroid_in_each_blob() {
    for seed in 0..20 {
        let data = blobs(42 + seed, 200, &[-5.0, 5.0]);
        let c = kmeanspp_seed(&data, 2, seed).unwrap();
        assert!(c[(0, 0)].signum() != c[(1, 0)].signum(), "seed {seed}: {c}");
        assert_eq!(c, kmeanspp_seed(&data, 2, seed).unwrap());
    }
}

#[test]
fn single_component_is_sample_moments() {
    let mut r = rng(43);
    let data = random_matrix(&mut r, 300, 3) * 2.0;
    let fit = gmm_em(&data, 1, 0, &GmmConfig::default()).unwrap();
    let mean = data.row_mean().transpose();
    let centered = DMatrix::from_fn(300, 3, |i, j| data[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / 300.0;
    assert!((fit.gaussians[0].mu() - mean).abs().max() <= 1e-12);
    assert!(max_abs_diff(fit.gaussians[0].sigma(), &cov) <= 1e-12);
}

#[test]
fn fixed_seed_is_deterministic() {
    let data = blobs(44, 500, &[-2.0, 0.0, 3.0]);
    let a = gmm_em(&data, 3, 9, &GmmConfig::default()).unwrap();
    let b = gmm_em(&data, 3, 9, &GmmConfig::default()).unwrap();
    assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
    assert_eq!(a.gaussians, b.gaussians);
}

#[test]
fn init_model_is_sticky_stable_and_memoryless() {
    let mut r = rng(45);
    let traj = random_trajectory(&mut r, 400, 2, 1.0);
    let data = pool_frames(std::slice::from_ref(&traj)).unwrap();
    let fit = gmm_em(&data, 3, 1, &GmmConfig::default()).unwrap();
    let params = init_model(&fit, 0.95, 0.5).unwrap();
    for i in 0..3 {
        let mut row: Vec<f64> = params.trans().row(i).iter().copied().collect();
        row.sort_by(f64::total_cmp);
        for (got, want) in row.iter().zip([0.025, 0.025, 0.95]) {
            assert!((got - want).abs() <= 1e-15);
        }
        let dy = &params.dynamics()[i];
        let g = &params.gaussians()[i];
        assert!(check_stability(dy, g, 0.99, 0.0).passes());
        assert_eq!(dy.q(), &(g.sigma() * 0.5));
    }
    // with A = 0 the emission ignores the previous frame
    let shuffled = Trajectory::new(DMatrix::from_fn(2, 2, |t, j| if t == 0 { 100.0 } else { traj.data()[(5, j)] }), "a").unwrap();
    let plain = Trajectory::new(DMatrix::from_fn(2, 2, |t, j| if t == 0 { -3.0 } else { traj.data()[(5, j)] }), "b").unwrap();
    let params = params.with_first_frame(mslds::FirstFrame::Context);
    let a = estep(&params, &[shuffled]).unwrap();
    let b = estep(&params, &[plain]).unwrap();
    assert!((a.loglik - b.loglik).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn em_loglik_never_decreases(seed in any::<u64>(), k in 1usize..5, d in 1usize..4) {
        let mut r = rng(seed);
        let n = 60 + 40 * k;
        let shifts: Vec<f64> = (0..k).map(|_| r.random_range(-4.0..4.0)).collect();
        let data = DMatrix::from_fn(n, d, |i, _| shifts[i % k] + normal(&mut r));
        let fit = gmm_em(&data, k, seed, &GmmConfig::default()).unwrap();
        for w in fit.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", fit.loglik_trace);
        }
        let params = init_model(&fit, 0.9, 1.0).unwrap();
        for s in 0..k {
            prop_assert!(check_stability(&params.dynamics()[s], &params.gaussians()[s], 0.99, 0.0).passes());
        }
    }
}
