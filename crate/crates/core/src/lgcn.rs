//! Normalization with a norm-bounded affine map.
//!
//! `y = L_affine · γ/‖γ‖₂ ⊙ (z − μ)/(σ + ε) + β`. Statistics are per sample
//! by default; batch statistics are available through [`StatAxis::First`].

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::autograd::{standardize_kernel, Graph, StatAxis, Var};
use crate::error::{LelError, Result};
use crate::params::{Constraint, ParamId, ParamStore};

pub const LGCN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct Lgcn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub l_affine: f64,
    pub eps: f64,
    pub stats: StatAxis,
    pub dim: usize,
}

impl Lgcn {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, l_affine: f64, stats: StatAxis) -> Result<Self> {
        if !(l_affine > 0.0) {
            return Err(LelError::ParameterDomain(format!(
                "L_affine must be positive, got {l_affine}"
            )));
        }
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::ones(IxDyn(&[dim])),
            Constraint::UnitGain,
        );
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])), Constraint::None);
        Ok(Self {
            gamma,
            beta,
            l_affine,
            eps: LGCN_EPS,
            stats,
            dim,
        })
    }

    fn check_gamma(&self, store: &ParamStore) -> Result<()> {
        let g = store.value(self.gamma);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(LelError::ParameterDomain(format!(
                "{}: gain vector has norm {n}",
                store.get(self.gamma).name
            )));
        }
        Ok(())
    }

    /// Standardization only.
    pub fn normalize_graph(&self, g: &mut Graph, x: Var) -> Var {
        g.standardize(x, self.eps, false, self.stats)
    }

    /// Affine part only: `L · γ/‖γ‖ ⊙ z + β`.
    pub fn affine_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        self.check_gamma(store)?;
        let gamma = g.param(store, self.gamma);
        let gn = g.l2_rescale(gamma, self.l_affine, 0.0);
        let y = g.mul_last_vec(z, gn);
        let beta = g.param(store, self.beta);
        Ok(g.add_last_vec(y, beta))
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(LelError::Shape(format!(
                "lgcn expects [B, {}], got {shape:?}",
                self.dim
            )));
        }
        let z = self.normalize_graph(g, x);
        self.affine_graph(g, store, z)
    }

    /// Resets a zero gain vector to ones; returns whether it did.
    pub fn sanitize(&self, store: &mut ParamStore) -> bool {
        if self.check_gamma(store).is_err() {
            store.value_mut(self.gamma).fill(1.0);
            return true;
        }
        false
    }
}

/// Plain-array forward for `[B × D]` features.
pub fn lgcn_forward(
    z: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    l_affine: f64,
    stats: StatAxis,
) -> Result<Array2<f64>> {
    if z.ncols() != gamma.len() || gamma.len() != beta.len() {
        return Err(LelError::Shape(format!(
            "features have {} columns, γ {} and β {}",
            z.ncols(),
            gamma.len(),
            beta.len()
        )));
    }
    let n = gamma.dot(gamma).sqrt();
    if !(n > 0.0) {
        return Err(LelError::ParameterDomain("gain vector γ has zero norm".into()));
    }
    let zt = standardize_kernel(&z.clone().into_dyn(), LGCN_EPS, false, stats)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let scale = gamma.mapv(|g| l_affine * g / n);
    Ok(zt * &scale + beta)
}
