//! Parameter storage with per-tensor constraint annotations.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constraint carried by a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Constraint {
    None,
    /// Largest singular value must stay at or below the bound.
    SpectralNorm(f64),
    /// Gain vector normalized to unit ℓ2 norm in the forward pass.
    UnitGain,
}

impl Constraint {
    pub fn tag(&self) -> String {
        match self {
            Constraint::None => "none".into(),
            Constraint::SpectralNorm(b) => format!("spectral<={b}"),
            Constraint::UnitGain => "unit_gain".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Constraint::None),
            "unit_gain" => Some(Constraint::UnitGain),
            _ => s
                .strip_prefix("spectral<=")
                .and_then(|b| b.parse().ok())
                .map(Constraint::SpectralNorm),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub constraint: Constraint,
    /// Warm-start vector for power iteration on spectrally constrained weights.
    pub(crate) power_vec: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, constraint: Constraint) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            constraint,
            power_vec: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Affine layer `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform(±1/√in) initialization; the weight is annotated with a
    /// spectral bound when `bound` is given.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bound: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let a = 1.0 / (d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid range");
        let w: Vec<f64> = (0..d_in * d_out).map(|_| dist.sample(rng)).collect();
        let constraint = bound.map_or(Constraint::None, Constraint::SpectralNorm);
        let weight = store.add(
            format!("{name}.weight"),
            ArrayD::from_shape_vec(IxDyn(&[d_in, d_out]), w).unwrap(),
            constraint,
        );
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d_out])), Constraint::None);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_last_vec(y, b)
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[1]
    }
}
