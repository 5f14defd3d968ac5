use std::sync::Arc;

use mino_core::gaussian_field::{sample_gp, GpSpec, Smoothness};
use mino_core::geometry::{Domain, PointSet};
use mino_core::metrics::{
    averaged_swd, evaluate, grid_metrics, median_bandwidth, mmd_unbiased, power_spectrum, radial_spectrum,
    sliced_wasserstein, wasserstein_1d, EvalConfig, MetricReport,
};
use mino_core::FunctionBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> FunctionBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = Arc::new(PointSet::regular_grid(d, 1, Domain::unit_box(1)).unwrap());
    let vals = (0..n * d).map(|_| shift + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    FunctionBatch::new(pts, 1, vals).unwrap()
}

fn on_points(batch: &FunctionBatch<f64>, pts: &Arc<PointSet>) -> FunctionBatch<f64> {
    FunctionBatch::new(pts.clone(), batch.f_dim(), batch.values().to_vec()).unwrap()
}

#[test]
fn swd_of_identical_sets_is_zero() {
    let x = cloud(40, 6, 0.0, 1);
    assert_eq!(sliced_wasserstein(&x, &x, 64, 2, 3).unwrap(), 0.0);
    let (mean, runs) = averaged_swd(&x, &x.select(&(0..40).rev().collect::<Vec<_>>()), 32, 4, 1, 5).unwrap();
    assert_eq!(mean, 0.0);
    assert_eq!(runs.len(), 4);
}

#[test]
fn swd_in_one_dimension_is_the_exact_distance() {
    let x = cloud(50, 1, 0.0, 2);
    let y = cloud(50, 1, 0.7, 3);
    for p in [1, 2] {
        let exact = wasserstein_1d(x.values(), y.values(), p).unwrap();
        let sliced = sliced_wasserstein(&x, &y, 5, p, 9).unwrap();
        assert!((exact - sliced).abs() < 1e-12, "p={p}: {exact} vs {sliced}");
    }
}

#[test]
fn swd_projection_count_converges() {
    let x = cloud(64, 2, 0.0, 4);
    let pts = x.points().clone();
    let mut y = cloud(64, 2, 0.0, 5);
    // Anisotropic target so the sliced distance depends on direction.
    for (i, v) in y.values_mut().iter_mut().enumerate() {
        *v = if i % 2 == 0 { 2.0 * *v + 1.0 } else { 0.5 * *v };
    }
    let y = on_points(&y, &pts);
    let coarse = sliced_wasserstein(&x, &y, 10_000, 2, 1).unwrap();
    let fine = sliced_wasserstein(&x, &y, 1_000_000, 2, 2).unwrap();
    assert!(((coarse - fine) / fine).abs() < 0.02, "{coarse} vs {fine}");
}

#[test]
fn swd_is_symmetric_and_permutation_invariant() {
    let x = cloud(30, 5, 0.0, 6);
    let y = on_points(&cloud(30, 5, 0.4, 7), x.points());
    let a = sliced_wasserstein(&x, &y, 50, 2, 11).unwrap();
    let b = sliced_wasserstein(&y, &x, 50, 2, 11).unwrap();
    assert!((a - b).abs() < 1e-12);
    let shuffled = y.select(&[3, 1, 4, 0, 2, 5, 9, 8, 7, 6, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 29, 28, 27, 26, 25, 24, 23, 22, 21, 20]);
    let c = sliced_wasserstein(&x, &shuffled, 50, 2, 11).unwrap();
    assert!((a - c).abs() < 1e-12);
}

fn naive_mmd(x: &FunctionBatch<f64>, y: &FunctionBatch<f64>, h: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / (2.0 * h * h)).exp();
    let (n, m) = (x.len(), y.len());
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += k(x.sample(i), x.sample(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += k(y.sample(i), y.sample(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += k(x.sample(i), y.sample(j));
        }
    }
    xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64
}

#[test]
fn mmd_matches_naive_triple_loop() {
    // Sizes straddle the 512-row block boundary.
    let x = cloud(530, 3, 0.0, 8);
    let y = on_points(&cloud(37, 3, 0.3, 9), x.points());
    for h in [0.5, 1.0, 3.0] {
        let fast = mmd_unbiased(&x, &y, h).unwrap();
        let slow = naive_mmd(&x, &y, h);
        assert!((fast - slow).abs() < 1e-12, "h={h}: {fast} vs {slow}");
    }
}

#[test]
fn mmd_null_distribution_is_centered() {
    let (n, m) = (200, 200);
    let x = cloud(n, 4, 0.0, 10);
    let y = on_points(&cloud(m, 4, 0.0, 11), x.points());
    let v = mmd_unbiased(&x, &y, 2.0).unwrap();
    assert!(v.abs() <= 4.0 / ((n * m) as f64).sqrt(), "{v}");
    let shifted = on_points(&cloud(m, 4, 1.0, 12), x.points());
    assert!(mmd_unbiased(&x, &shifted, 2.0).unwrap() > 10.0 * v.abs());
}

#[test]
fn kernel_is_one_on_the_diagonal() {
    // Two identical samples against two distant ones: k(x, x) = 1 and cross terms vanish.
    let pts = Arc::new(PointSet::regular_grid(2, 1, Domain::unit_box(1)).unwrap());
    let x = FunctionBatch::new(pts.clone(), 1, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let y = FunctionBatch::new(pts, 1, vec![1e3, 1e3, 1e3, 1e3]).unwrap();
    assert!((mmd_unbiased(&x, &y, 1.0).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn median_bandwidth_examples() {
    let pts = Arc::new(PointSet::regular_grid(1, 1, Domain::unit_box(1)).unwrap());
    let x = FunctionBatch::new(pts.clone(), 1, vec![0.0]).unwrap();
    let y = FunctionBatch::new(pts.clone(), 1, vec![3.0]).unwrap();
    let (h, fallback) = median_bandwidth(&x, &y).unwrap();
    assert!(!fallback);
    assert!((h - 3.0 / 2f64.sqrt()).abs() < 1e-12);

    let same = FunctionBatch::new(pts, 1, vec![1.5, 1.5]).unwrap();
    assert_eq!(median_bandwidth(&same, &same).unwrap(), (1.0, true));
}

#[test]
fn median_bandwidth_matches_exhaustive_median() {
    let x = cloud(60, 3, 0.0, 13);
    let y = on_points(&cloud(40, 3, 0.5, 14), x.points());
    let pooled: Vec<&[f64]> = (0..60).map(|i| x.sample(i)).chain((0..40).map(|i| y.sample(i))).collect();
    let mut d = Vec::new();
    for i in 0..100 {
        for j in i + 1..100 {
            d.push(pooled[i].iter().zip(pooled[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let median = 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]);
    let (h, _) = median_bandwidth(&x, &y).unwrap();
    assert!((h - median / 2f64.sqrt()).abs() < 1e-10);
}

fn grid(n: usize) -> Arc<PointSet> {
    Arc::new(PointSet::regular_grid(n, n, Domain::unit_box(2)).unwrap())
}

#[test]
fn grid_metrics_vanish_on_identical_sets() {
    let x = sample_gp::<f64>(&GpSpec::new(0.3, Smoothness::ThreeHalves), grid(8), 10, 1).unwrap();
    let m = grid_metrics(&x, &x).unwrap();
    assert_eq!((m.spectra_mse, m.autocov_mse, m.density_mse), (0.0, 0.0, 0.0));
}

#[test]
fn white_noise_has_a_flat_spectrum() {
    let pts = grid(16);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let vals = (0..400 * 256).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let x = FunctionBatch::new(pts, 1, vals).unwrap();
    let power = power_spectrum(&x).unwrap();
    for p in &power {
        assert!((p - 1.0).abs() < 0.25, "{p}");
    }
    let radial = radial_spectrum(&power, 16, 16);
    for r in &radial[1..] {
        assert!((r - 1.0).abs() < 0.1, "{r}");
    }
}

#[test]
fn gp_lag_zero_autocovariance_is_the_variance() {
    let x = sample_gp::<f64>(&GpSpec::new(0.2, Smoothness::ThreeHalves), grid(16), 400, 2).unwrap();
    let power = power_spectrum(&x).unwrap();
    let ac = mino_core::metrics::autocovariance(&power, 16, 16);
    assert!((ac[0] - 1.0).abs() < 0.05, "{}", ac[0]);
}

#[test]
fn grid_metrics_need_a_grid() {
    let x = cloud(4, 5, 0.0, 16);
    let scattered = Arc::new(PointSet::new(vec![0.1, 0.7, 0.3, 0.9, 0.5], 1, Domain::unit_box(1)).unwrap());
    let x = on_points(&x, &scattered);
    assert!(grid_metrics(&x, &x).is_err());
}

#[test]
fn report_round_trips_through_text() {
    let x = sample_gp::<f32>(&GpSpec::new(0.3, Smoothness::ThreeHalves), grid(6), 20, 3).unwrap();
    let y = sample_gp::<f32>(&GpSpec::new(0.1, Smoothness::Half), grid(6), 20, 4).unwrap();
    let cfg = EvalConfig {
        n_projections: 16,
        n_run: 3,
        seed: 12345,
        ..EvalConfig::default()
    };
    let report = evaluate(&x, &y, &cfg).unwrap();
    assert_eq!(report.metadata.run_seeds.len(), 3);
    assert!(report.grid.is_some());
    assert_eq!(report.metadata.bandwidth_source, "median");
    let back = MetricReport::from_text(&report.to_text()).unwrap();
    assert_eq!(back, report);
    assert!(MetricReport::from_text("swd_mean = 1.0").is_err());
}
