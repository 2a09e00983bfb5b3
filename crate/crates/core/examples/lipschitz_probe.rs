//! Empirical Lipschitz estimates of a linear map and of the norm rescaling,
//! compared with their exact constants.

use lel::lgcbe::lipschitz_rescale;
use lel::spectral::{power_iteration, TRAIN_POWER_ITERS, TRAIN_POWER_TOL};
use lel::verification::{empirical_lipschitz, ProbeConfig};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> lel::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let w = Array2::from_shape_simple_fn((4, 6), || StandardNormal.sample(&mut rng));
    let sigma = power_iteration(w.view(), TRAIN_POWER_ITERS, TRAIN_POWER_TOL, None).sigma;
    let wt = w.t().to_owned();
    let linear = move |x: &ArrayD<f64>| -> lel::Result<ArrayD<f64>> {
        Ok(x.view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .dot(&wt)
            .into_dyn())
    };
    let pool = ArrayD::from_shape_simple_fn(IxDyn(&[128, 6]), || StandardNormal.sample(&mut rng));
    let cfg = ProbeConfig {
        n_pairs: 10_000,
        ..ProbeConfig::default()
    };
    let est = empirical_lipschitz(&linear, &pool, &cfg)?;
    println!(
        "linear map: estimate {:.6} from {} pairs, sigma {sigma:.6}",
        est.value, est.probes
    );

    for eps in [1e-1, 1e-2] {
        let rescale = move |x: &ArrayD<f64>| -> lel::Result<ArrayD<f64>> {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let v = lipschitz_rescale(row.as_slice().unwrap(), 1.0, eps);
                row.assign(&ndarray::ArrayView1::from(&v));
            }
            Ok(out)
        };
        let est = empirical_lipschitz(&rescale, &pool, &cfg)?;
        println!(
            "rescale with eps {eps}: estimate {:.4} at scale {}",
            est.value, est.worst_scale
        );
    }
    Ok(())
}
