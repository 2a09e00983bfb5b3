//! Multi-head attention with clamped logits and a spectrally bounded output
//! projection.

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_last_inplace, Graph, Var};
use crate::error::{LelError, Result};
use crate::params::{Linear, ParamStore};

pub use crate::spectral::spectral_norm_project;

/// Forward-pass mode. Dropout draws from the generator in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(r) => Mode::Train(r),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// `Q Kᵀ / √d_h` for `Q, K: [N × T × d_h]`.
pub fn attention_scores(q: &Array3<f64>, k: &Array3<f64>) -> Result<Array3<f64>> {
    if q.dim().0 != k.dim().0 || q.dim().2 != k.dim().2 {
        return Err(LelError::Shape(format!("Q {:?} and K {:?} disagree", q.dim(), k.dim())));
    }
    let (n, tq, dh) = q.dim();
    let tk = k.dim().1;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut s = Array3::zeros((n, tq, tk));
    for i in 0..n {
        let prod = q.index_axis(Axis(0), i).dot(&k.index_axis(Axis(0), i).t());
        s.index_axis_mut(Axis(0), i).assign(&(prod * scale));
    }
    Ok(s)
}

/// Row softmax of `clip(S, −c, c)`.
pub fn clamp_softmax(s: &Array3<f64>, c: f64) -> Array3<f64> {
    let mut a = s.mapv(|v| v.clamp(-c, c)).into_dyn();
    softmax_last_inplace(&mut a);
    a.into_dimensionality().unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct Lgca {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// Output projection, the only spectrally constrained weight here.
    pub wo: Linear,
    pub heads: usize,
    pub d_head: usize,
    pub d_model: usize,
    pub l_att: f64,
    pub dropout: f64,
}

pub struct LgcaVars {
    pub out: Var,
    /// `[B·H × T × T]` attention after the clamp and softmax, before dropout.
    pub attention: Var,
}

impl Lgca {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        l_att: f64,
        l_linear: f64,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(LelError::InvalidSpec(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        if !(l_att > 0.0) {
            return Err(LelError::ParameterDomain(format!(
                "L_att must be positive, got {l_att}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(LelError::ParameterDomain(format!(
                "dropout must lie in [0, 1), got {dropout}"
            )));
        }
        let inner = d_model;
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), d_model, inner, None, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_model, inner, None, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d_model, inner, None, rng),
            wo: Linear::new(store, &format!("{name}.wo"), inner, d_model, Some(l_linear), rng),
            heads,
            d_head: d_model / heads,
            d_model,
            l_att,
            dropout,
        })
    }

    /// Logit clamp `c = L_att · √d_h`.
    pub fn clamp_bound(&self) -> f64 {
        self.l_att * (self.d_head as f64).sqrt()
    }

    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, t: usize) -> Var {
        let x = g.reshape(x, &[b, t, self.heads, self.d_head]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, t, self.d_head])
    }

    /// `x: [B × T × D]` → `[B × T × D]`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode<'_>) -> Result<LgcaVars> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(LelError::Shape(format!(
                "lgca expects [B, T, {}], got {shape:?}",
                self.d_model
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let q = self.wq.forward(g, store, x);
        let k = self.wk.forward(g, store, x);
        let v = self.wv.forward(g, store, x);
        let q = self.split_heads(g, q, b, t);
        let k = self.split_heads(g, k, b, t);
        let v = self.split_heads(g, v, b, t);
        let s = g.bmm(q, k, true);
        let s = g.scale(s, 1.0 / (self.d_head as f64).sqrt());
        let s = g.clamp(s, self.clamp_bound());
        let a = g.softmax(s);
        for (i, head) in g.value(a).outer_iter().enumerate() {
            if head.iter().any(|v| !v.is_finite()) {
                return Err(LelError::numeric(
                    format!("lgca head {}", i % self.heads),
                    format!("non-finite attention in sample {}", i / self.heads),
                ));
            }
        }
        let a_used = match mode {
            Mode::Train(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask = ArrayD::from_shape_fn(IxDyn(g.shape(a)), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                g.mul_const(a, mask)
            }
            _ => a,
        };
        let o = g.bmm(a_used, v, false);
        let o = g.reshape(o, &[b, self.heads, t, self.d_head]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[b, t, self.d_model]);
        let out = self.wo.forward(g, store, o);
        Ok(LgcaVars { out, attention: a })
    }
}

/// Plain-array forward in evaluation mode; returns the output and the
/// per-head attention `[B·H × T × T]`.
pub fn lgca_forward(x: &Array3<f64>, module: &Lgca, store: &ParamStore) -> Result<(Array3<f64>, Array3<f64>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone().into_dyn());
    let vars = module.forward_graph(&mut g, store, xv, Mode::Eval)?;
    Ok((
        g.value(vars.out).clone().into_dimensionality().unwrap(),
        g.value(vars.attention).clone().into_dimensionality().unwrap(),
    ))
}
