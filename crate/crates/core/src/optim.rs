//! Adam.

use ndarray::{ArrayD, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<Option<(ArrayD<f64>, ArrayD<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update; returns the parameters whose values changed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, ArrayD<f64>)]) -> Vec<ParamId> {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let mut changed = Vec::new();
        for (id, g) in grads {
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            let value = store.value_mut(*id);
            let mut moved = false;
            Zip::from(value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let upd = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                if upd != 0.0 {
                    let before = *w;
                    *w -= upd;
                    moved |= *w != before;
                }
            });
            if moved {
                changed.push(*id);
            }
        }
        changed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Constraint;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[3]), 1.0), Constraint::None);
        let mut opt = Adam::new(0.1);
        let g = ArrayD::from_shape_vec(IxDyn(&[3]), vec![2.0, -0.5, 0.0]).unwrap();
        let changed = opt.step(&mut store, &[(id, g)]);
        assert_eq!(changed, vec![id]);
        let w = store.value(id);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter_bitwise() {
        let mut store = ParamStore::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[2]), 0.123), Constraint::None);
        let mut opt = Adam::new(3e-4);
        let changed = opt.step(&mut store, &[(id, ArrayD::zeros(IxDyn(&[2])))]);
        assert!(changed.is_empty());
        assert!(store.value(id).iter().all(|&v| v == 0.123));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[1]), 5.0), Constraint::None);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = store.value(id).mapv(|w| 2.0 * (w - 1.5));
            opt.step(&mut store, &[(id, g)]);
        }
        assert!((store.value(id)[0] - 1.5).abs() < 1e-3);
    }
}
