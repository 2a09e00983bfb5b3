//! Power iteration and spectral-norm projection.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LelError, Result};
use crate::params::{Constraint, ParamId, ParamStore};

pub const DEFAULT_POWER_ITERS: usize = 200;
pub const DEFAULT_POWER_TOL: f64 = 1e-8;
/// Settings used when projecting after optimizer steps.
pub const TRAIN_POWER_ITERS: usize = 2000;
pub const TRAIN_POWER_TOL: f64 = 1e-12;
const START_SEED: u64 = 0x005e_ed0f_5eed;
/// Largest per-iteration relative change accepted from a run that hit the
/// iteration cap. Near-equal top singular values slow the vector down while
/// the value itself is already accurate to second order.
pub const STALL_RESIDUAL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct PowerEstimate {
    pub sigma: f64,
    pub iters: usize,
    pub converged: bool,
    /// Relative change of the estimate at the last iteration.
    pub residual: f64,
    /// Right singular vector estimate (unit norm).
    pub vector: Vec<f64>,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value of `w` via power iteration on `WᵀW`.
///
/// The start vector is `start` when given (warm start) and otherwise a
/// fixed-seed Gaussian draw, so results are deterministic.
pub fn power_iteration(w: ArrayView2<f64>, max_iters: usize, tol: f64, start: Option<&[f64]>) -> PowerEstimate {
    let n = w.ncols();
    let mut v: Vec<f64> = match start {
        Some(s) if s.len() == n && s.iter().any(|x| *x != 0.0) => s.to_vec(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    };
    if normalize(&mut v) == 0.0 || w.iter().all(|x| *x == 0.0) {
        return PowerEstimate {
            sigma: 0.0,
            iters: 0,
            converged: true,
            residual: 0.0,
            vector: v,
        };
    }
    let mut sigma = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let u = w.dot(&ndarray::ArrayView1::from(&v[..]));
        let s = u.dot(&u).sqrt();
        let mut next = w.t().dot(&u).to_vec();
        if normalize(&mut next) == 0.0 {
            // v fell in the null space; restart is pointless for a rank-0 map
            return PowerEstimate {
                sigma: s,
                iters: it,
                converged: true,
                residual: 0.0,
                vector: v,
            };
        }
        residual = if s > 0.0 { (s - sigma).abs() / s } else { 0.0 };
        sigma = s;
        v = next;
        if residual < tol {
            // one more Rayleigh evaluation at the refreshed vector
            let u = w.dot(&ndarray::ArrayView1::from(&v[..]));
            sigma = sigma.max(u.dot(&u).sqrt());
            return PowerEstimate {
                sigma,
                iters: it,
                converged: true,
                residual,
                vector: v,
            };
        }
    }
    PowerEstimate {
        sigma,
        iters: max_iters,
        converged: false,
        residual,
        vector: v,
    }
}

/// Rescales `w` so that `σ_max(w) <= bound`; a no-op when already inside.
pub fn spectral_norm_project(w: &Array2<f64>, bound: f64, iters: usize, tol: f64) -> Result<Array2<f64>> {
    let (out, _) = project_with_start(w, bound, iters, tol, None)?;
    Ok(out)
}

/// Like [`spectral_norm_project`] with a warm start; also returns the
/// refined singular vector for the next call.
pub fn project_with_start(
    w: &Array2<f64>,
    bound: f64,
    iters: usize,
    tol: f64,
    start: Option<&[f64]>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    if w.iter().any(|x| !x.is_finite()) {
        return Err(LelError::numeric(
            "spectral_norm_project",
            "weight has non-finite entries",
        ));
    }
    if !(bound > 0.0) {
        return Err(LelError::ParameterDomain(format!(
            "spectral bound must be positive, got {bound}"
        )));
    }
    let est = power_iteration(w.view(), iters, tol, start);
    if !est.converged && !(est.residual <= STALL_RESIDUAL) {
        return Err(LelError::NoConvergence {
            iters: est.iters,
            residual: est.residual,
        });
    }
    if est.sigma <= bound {
        return Ok((w.clone(), est.vector));
    }
    let mut out = w * (bound / est.sigma);
    // the Rayleigh estimate approaches σ from below; tighten once more
    let check = power_iteration(out.view(), iters, tol, Some(&est.vector));
    if check.sigma > bound {
        out *= bound / check.sigma;
    }
    Ok((out, check.vector))
}

/// Projects every spectrally annotated parameter in `ids` (all of them when
/// `None`) onto its bound, warm-starting power iteration from the vector
/// kept with the parameter.
pub fn project_store(store: &mut ParamStore, ids: Option<&[ParamId]>, iters: usize, tol: f64) -> Result<()> {
    let all: Vec<ParamId> = store.ids().collect();
    for &id in ids.unwrap_or(&all) {
        let p = store.get_mut(id);
        let Constraint::SpectralNorm(bound) = p.constraint else {
            continue;
        };
        let w = p
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| LelError::Shape(format!("{} is constrained but not a matrix", p.name)))?
            .to_owned();
        let (out, v) = project_with_start(&w, bound, iters, tol, p.power_vec.as_deref()).map_err(|e| match e {
            LelError::NoConvergence { .. } | LelError::NumericDomain { .. } => {
                LelError::numeric(format!("projecting {}", p.name), e.to_string())
            }
            other => other,
        })?;
        if out != w {
            p.value = out.into_dyn();
        }
        p.power_vec = Some(v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_and_identity() {
        let d = array![[3.0, 0.0], [0.0, 1.0]];
        assert!((power_iteration(d.view(), 200, 1e-12, None).sigma - 3.0).abs() < 1e-9);
        let i = Array2::<f64>::eye(6);
        assert!((power_iteration(i.view(), 200, 1e-12, None).sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projects_diag_three_one() {
        let d = array![[3.0, 0.0], [0.0, 1.0]];
        let p = spectral_norm_project(&d, 1.0, 500, 1e-12).unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((p[[1, 1]] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn inside_bound_is_exact_noop() {
        let w = array![[0.3, -0.2], [0.1, 0.4]];
        assert_eq!(spectral_norm_project(&w, 1.0, 200, 1e-10).unwrap(), w);
    }

    #[test]
    fn zero_matrix() {
        let z = Array2::<f64>::zeros((3, 2));
        let est = power_iteration(z.view(), 10, 1e-8, None);
        assert_eq!(est.sigma, 0.0);
        assert!(est.converged);
    }

    #[test]
    fn rejects_non_finite() {
        let w = array![[f64::NAN, 0.0]];
        assert!(spectral_norm_project(&w, 1.0, 10, 1e-8).is_err());
    }
}
