//! Power iteration against a closed-form spectral norm, and projection of a
//! random weight onto a norm ball.

use lel::spectral::{power_iteration, spectral_norm_project, TRAIN_POWER_ITERS, TRAIN_POWER_TOL};
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> lel::Result<()> {
    let d = array![[3.0, 0.0], [0.0, 1.0]];
    let est = power_iteration(d.view(), TRAIN_POWER_ITERS, TRAIN_POWER_TOL, None);
    println!("diag(3, 1): sigma {:.12} after {} iterations", est.sigma, est.iters);
    let p = spectral_norm_project(&d, 1.0, TRAIN_POWER_ITERS, TRAIN_POWER_TOL)?;
    println!("projected onto the unit ball:\n{p:.6}");

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let w = Array2::from_shape_simple_fn((16, 32), || StandardNormal.sample(&mut rng));
    let before = power_iteration(w.view(), TRAIN_POWER_ITERS, TRAIN_POWER_TOL, None).sigma;
    let projected = spectral_norm_project(&w, 1.0, TRAIN_POWER_ITERS, TRAIN_POWER_TOL)?;
    let after = power_iteration(projected.view(), TRAIN_POWER_ITERS, TRAIN_POWER_TOL, None).sigma;
    println!("random 16x32: sigma {before:.6} -> {after:.12}");
    Ok(())
}
