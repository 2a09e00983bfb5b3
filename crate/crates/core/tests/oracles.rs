//! Cross-checks of the numerical kernels against independent references.

use nalgebra::DMatrix;
use ndarray::{array, Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use lel::autograd::StatAxis;
use lel::lgcbe::lipschitz_rescale;
use lel::lgcn::{lgcn_forward, LGCN_EPS};
use lel::spectral::{power_iteration, spectral_norm_project, DEFAULT_POWER_ITERS, TRAIN_POWER_ITERS, TRAIN_POWER_TOL};
use lel::verification::{empirical_lipschitz, ProbeConfig};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn svd_max(w: &Array2<f64>) -> f64 {
    let m = DMatrix::from_row_iterator(w.nrows(), w.ncols(), w.iter().copied());
    m.singular_values().max()
}

#[test]
fn power_iteration_matches_svd_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let w = gaussian(5, 5, &mut rng);
        let est = power_iteration(w.view(), TRAIN_POWER_ITERS, TRAIN_POWER_TOL, None);
        let truth = svd_max(&w);
        assert!((est.sigma - truth).abs() / truth < 1e-6, "{} vs {truth}", est.sigma);
    }
}

#[test]
fn projection_respects_bound_under_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (rows, cols, bound) in [(5, 5, 1.0), (8, 3, 0.5), (2, 9, 2.0), (16, 16, 1.0)] {
        let w = gaussian(rows, cols, &mut rng) * 3.0;
        let p = spectral_norm_project(&w, bound, TRAIN_POWER_ITERS, TRAIN_POWER_TOL).unwrap();
        let sigma = svd_max(&p);
        assert!(sigma <= bound * (1.0 + 1e-9), "{sigma} > {bound}");
        assert!(sigma >= bound * (1.0 - 1e-6), "projection overshrank: {sigma}");
        // direction is preserved
        let ratio = &p / &w;
        let r0 = ratio[[0, 0]];
        assert!(ratio.iter().all(|r| (r - r0).abs() < 1e-12));
    }
}

#[test]
fn empirical_constant_of_linear_map_approaches_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = gaussian(4, 5, &mut rng);
    let sigma = svd_max(&w);
    let pool = gaussian(64, 5, &mut rng).into_dyn();
    let wt = w.t().to_owned();
    let f = move |x: &ArrayD<f64>| -> lel::Result<ArrayD<f64>> {
        let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        Ok(x2.dot(&wt).into_dyn())
    };
    let cfg = ProbeConfig {
        n_pairs: 10_000,
        scales: vec![1e-2],
        seed: 1,
        chunk: 1024,
    };
    let est = empirical_lipschitz(&f, &pool, &cfg).unwrap();
    assert_eq!(est.probes, 10_000);
    assert!(est.value <= sigma * (1.0 + 1e-9), "{} > {sigma}", est.value);
    assert!(est.value >= 0.95 * sigma, "{} < 0.95·{sigma}", est.value);
}

#[test]
fn rescale_constant_is_governed_by_epsilon() {
    // dense sweep of the scalar map v ↦ L v / (|v| + ε)
    let (l, eps) = (1.0, 0.1);
    let n = 400_001;
    let grid: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&v| lipschitz_rescale(&[v], l, eps)[0]).collect();
    let sweep = grid
        .windows(2)
        .zip(vals.windows(2))
        .map(|(x, y)| (y[1] - y[0]).abs() / (x[1] - x[0]))
        .fold(0.0, f64::max);
    assert!((sweep - l / eps).abs() / (l / eps) < 1e-3, "sweep slope {sweep}");

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pool = ArrayD::from_shape_fn(IxDyn(&[256, 1]), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        2.0 * v
    });
    let f = move |x: &ArrayD<f64>| -> lel::Result<ArrayD<f64>> { Ok(x.mapv(|v| lipschitz_rescale(&[v], l, eps)[0])) };
    let est = empirical_lipschitz(&f, &pool, &ProbeConfig::default()).unwrap();
    assert!(est.value <= sweep * (1.0 + 1e-6));
    assert!(est.value > 0.0);

    // far from the origin the output norm saturates at L
    for norm in [1.0, 10.0, 1e3] {
        let v = [norm * 0.6, norm * 0.8];
        let out = lipschitz_rescale(&v, l, 1e-8);
        let out_norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((out_norm - l * norm / (norm + 1e-8)).abs() < 1e-15);
    }
}

#[test]
fn lgcn_single_active_gain() {
    // D = 2, γ = (1, 0): the whole budget goes to the first feature
    let z = array![[1.0, 3.0], [4.0, 0.0]];
    let l = 2.0;
    let beta = array![0.5, -0.5];
    let y = lgcn_forward(&z, &array![1.0, 0.0], &beta, l, StatAxis::Last).unwrap();
    for (row, zr) in y.axis_iter(Axis(0)).zip(z.axis_iter(Axis(0))) {
        let mean = (zr[0] + zr[1]) / 2.0;
        let var = ((zr[0] - mean).powi(2) + (zr[1] - mean).powi(2)) / 2.0;
        let z0 = (zr[0] - mean) / (var.sqrt() + LGCN_EPS);
        assert!((row[0] - (l * z0 + 0.5)).abs() < 1e-12);
        assert_eq!(row[1], -0.5);
    }
}

#[test]
fn power_iteration_default_budget_suffices_for_small_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..10 {
        let w = gaussian(8, 8, &mut rng);
        let est = power_iteration(w.view(), DEFAULT_POWER_ITERS, 1e-8, None);
        let truth = svd_max(&w);
        assert!((est.sigma - truth).abs() / truth < 1e-4);
    }
}
