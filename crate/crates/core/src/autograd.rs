//! A small define-by-run reverse-mode differentiation graph over `f64`
//! tensors.
//!
//! Every forward pass builds a fresh [`Graph`]; nodes are appended in
//! evaluation order so the backward sweep is a reverse scan. Only the ops
//! the model actually needs are provided, each with a hand-written
//! vector-Jacobian product.

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use crate::fft;
use crate::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StatAxis {
    /// Statistics along the last axis (one set per row).
    Last,
    /// Statistics along axis 0 (one set per column of a `[B, D]` input).
    First,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, ArrayD<f64>),
    AddLastVec(Var, Var),
    MulLastVec(Var, Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Log1p(Var),
    Clamp(Var, f64),
    Softmax(Var),
    Standardize {
        x: Var,
        eps: f64,
        sqrt_var: bool,
        axis: StatAxis,
    },
    L2Rescale {
        x: Var,
        scale: f64,
        eps: f64,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MeanAxis(Var, usize),
    Rfft(Var),
    Irfft(Var),
    BandMask {
        wc: Var,
        ss: Var,
        bin_band: Vec<Option<usize>>,
    },
    SpectrumScale(Var, Var),
    BandEnergy(Var, Vec<(usize, usize)>),
    BinMagnitude(Var, Vec<usize>),
    Nll {
        p: Var,
        labels: Vec<usize>,
        floor: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    kinks: Option<Vec<bool>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            kinks: None,
        }
    }

    /// A graph that records the activity pattern of every piecewise op
    /// (rectifier sign, clamp saturation, magnitude at zero). Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn with_kink_tracking() -> Self {
        Self {
            kinks: Some(Vec::new()),
            ..Self::new()
        }
    }

    pub fn kink_pattern(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is wanted.
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const: shape mismatch");
        let value = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    /// `x[.., m] + b[m]`.
    pub fn add_last_vec(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        self.push(value, Op::AddLastVec(x, b), rg)
    }

    /// `x[.., m] * g[m]`.
    pub fn mul_last_vec(&mut self, x: Var, g: Var) -> Var {
        let value = self.value(x) * self.value(g);
        let rg = self.rg(x) || self.rg(g);
        self.push(value, Op::MulLastVec(x, g), rg)
    }

    /// `x[.., n] · w[n, m] -> [.., m]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul: weight must be rank 2");
        assert_eq!(*xs.last().unwrap(), ws[0], "matmul: inner dims {:?} x {:?}", xs, ws);
        let x2 = as_rows(self.value(x));
        let w2 = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let out = x2.dot(&w2);
        let mut shape = xs;
        *shape.last_mut().unwrap() = ws[1];
        let value = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::MatMul(x, w), rg)
    }

    /// Batched product `a[N, p, q] · b[N, q, r]` (or `b[N, r, q]ᵀ`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = bmm_kernel(self.value(a), self.value(b), false, trans_b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        if let Some(k) = self.kinks.as_mut() {
            k.extend(self.nodes[x.0].value.iter().map(|&v| v > 0.0));
        }
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `ln(1 + x)`; intended for nonnegative inputs.
    pub fn log1p(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln_1p);
        let rg = self.rg(x);
        self.push(value, Op::Log1p(x), rg)
    }

    /// Elementwise clamp to `[-c, c]`; the gradient passes through at the
    /// boundary itself.
    pub fn clamp(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(-c, c));
        if let Some(k) = self.kinks.as_mut() {
            k.extend(self.nodes[x.0].value.iter().map(|&v| v.abs() <= c));
        }
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, c), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        softmax_last_inplace(&mut value);
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// `(x - mean) / (std + eps)` (or `/ sqrt(var + eps)` when `sqrt_var`),
    /// population statistics along `axis`.
    pub fn standardize(&mut self, x: Var, eps: f64, sqrt_var: bool, axis: StatAxis) -> Var {
        let value = standardize_kernel(self.value(x), eps, sqrt_var, axis);
        let rg = self.rg(x);
        self.push(value, Op::Standardize { x, eps, sqrt_var, axis }, rg)
    }

    /// `scale * v / (‖v‖₂ + eps)` per row along the last axis.
    pub fn l2_rescale(&mut self, x: Var, scale: f64, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let last = Axis(value.ndim() - 1);
        for mut row in value.lanes_mut(last) {
            let n = row.dot(&row).sqrt();
            let f = scale / (n + eps);
            row.mapv_inplace(|v| v * f);
        }
        let rg = self.rg(x);
        self.push(value, Op::L2Rescale { x, scale, eps }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let rg = self.rg(x);
        self.push(value, Op::Permute(x, perm.to_vec()), rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).mean_axis(Axis(axis)).expect("non-empty axis");
        let rg = self.rg(x);
        self.push(value, Op::MeanAxis(x, axis), rg)
    }

    /// Real-input half spectrum along the last axis: `[.., T] -> [.., F, 2]`.
    pub fn rfft(&mut self, x: Var) -> Var {
        let value = fft::rfft_last(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Rfft(x), rg)
    }

    /// Inverse of [`Graph::rfft`] to length `n`.
    pub fn irfft(&mut self, spec: Var, n: usize) -> Var {
        assert_eq!(fft::half_len(n), self.shape(spec)[self.shape(spec).len() - 2]);
        let value = fft::irfft_last(self.value(spec), n);
        let rg = self.rg(spec);
        self.push(value, Op::Irfft(spec), rg)
    }

    /// Spectral mask `M[b, c, k] = wc[b, c] * ss[b, band(k)]`, zero for bins
    /// outside every band.
    pub fn band_mask(&mut self, wc: Var, ss: Var, bin_band: Vec<Option<usize>>) -> Var {
        let (b, c) = (self.shape(wc)[0], self.shape(wc)[1]);
        let f = bin_band.len();
        let wcv = self.value(wc);
        let ssv = self.value(ss);
        let mut value = ArrayD::zeros(IxDyn(&[b, c, f]));
        for bi in 0..b {
            for ci in 0..c {
                let w = wcv[[bi, ci]];
                for (k, band) in bin_band.iter().enumerate() {
                    if let Some(band) = band {
                        value[[bi, ci, k]] = w * ssv[[bi, *band]];
                    }
                }
            }
        }
        let rg = self.rg(wc) || self.rg(ss);
        self.push(value, Op::BandMask { wc, ss, bin_band }, rg)
    }

    /// `spec[.., F, 2] * mask[.., F]` (real mask on complex bins).
    pub fn spectrum_scale(&mut self, spec: Var, mask: Var) -> Var {
        let s = self.value(spec);
        let m = self.value(mask);
        assert_eq!(&s.shape()[..s.ndim() - 1], m.shape(), "spectrum_scale: shape");
        let mut value = s.clone();
        Zip::from(value.lanes_mut(Axis(s.ndim() - 1)))
            .and(m)
            .for_each(|mut pair, &w| pair.mapv_inplace(|v| v * w));
        let rg = self.rg(spec) || self.rg(mask);
        self.push(value, Op::SpectrumScale(spec, mask), rg)
    }

    /// Band energies `[.., F, 2] -> [.., NB]`, each the sum of squared
    /// magnitudes over bins `[lo, hi)`.
    pub fn band_energy(&mut self, spec: Var, bins: Vec<(usize, usize)>) -> Var {
        let s = self.value(spec);
        let nd = s.ndim();
        let mut shape = s.shape()[..nd - 2].to_vec();
        shape.push(bins.len());
        let f = s.shape()[nd - 2];
        let flat = s.as_standard_layout();
        let flat = flat.as_slice().unwrap();
        let rows = flat.len() / (2 * f);
        let mut out = Vec::with_capacity(rows * bins.len());
        for r in 0..rows {
            let row = &flat[r * 2 * f..(r + 1) * 2 * f];
            for &(lo, hi) in &bins {
                out.push(row[2 * lo..2 * hi].iter().map(|v| v * v).sum());
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let rg = self.rg(spec);
        self.push(value, Op::BandEnergy(spec, bins), rg)
    }

    /// Magnitudes of the selected bins: `[.., F, 2] -> [.., sel.len()]`.
    pub fn bin_magnitude(&mut self, spec: Var, sel: Vec<usize>) -> Var {
        let s = self.value(spec);
        let nd = s.ndim();
        let f = s.shape()[nd - 2];
        let mut shape = s.shape()[..nd - 2].to_vec();
        shape.push(sel.len());
        let flat = s.as_standard_layout();
        let flat = flat.as_slice().unwrap();
        let rows = flat.len() / (2 * f);
        let mut out = Vec::with_capacity(rows * sel.len());
        for r in 0..rows {
            let row = &flat[r * 2 * f..(r + 1) * 2 * f];
            for &k in &sel {
                out.push(row[2 * k].hypot(row[2 * k + 1]));
            }
        }
        if let Some(kk) = self.kinks.as_mut() {
            kk.extend(out.iter().map(|&m| m > 0.0));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let rg = self.rg(spec);
        self.push(value, Op::BinMagnitude(spec, sel), rg)
    }

    /// Mean negative log-likelihood of `labels` under row posteriors
    /// `p[B, K]`, with probabilities floored at `floor`.
    pub fn nll(&mut self, p: Var, labels: &[usize], floor: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape()[0], labels.len());
        let b = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv[[i, y]].max(floor).ln())
            .sum::<f64>()
            / b;
        let rg = self.rg(p);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::Nll {
                p,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        )
    }

    /// Vector-Jacobian product of `out` with `seed` (ones if `None`).
    pub fn backward(&self, out: Var, seed: Option<ArrayD<f64>>) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let seed = seed.unwrap_or_else(|| ArrayD::ones(self.value(out).raw_dim()));
        assert_eq!(seed.shape(), self.shape(out), "backward: seed shape");
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: ArrayD<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::MulConst(a, c) => acc(*a, g * c),
            Op::AddLastVec(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    acc(*b, as_rows(g).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MulLastVec(x, gain) => {
                acc(*x, g * self.value(*gain));
                if self.rg(*gain) {
                    let prod = g * self.value(*x);
                    acc(*gain, as_rows(&prod).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MatMul(x, w) => {
                let g2 = as_rows(g);
                let w2 = self.value(*w).view().into_dimensionality::<Ix2>().unwrap();
                if self.rg(*x) {
                    let gx = g2.dot(&w2.t());
                    acc(*x, gx.into_shape_with_order(IxDyn(self.shape(*x))).unwrap());
                }
                if self.rg(*w) {
                    let x2 = as_rows(self.value(*x));
                    acc(*w, x2.t().dot(&g2).into_dyn());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    // dA = G · Bᵀ  (or G · B when B was transposed)
                    acc(*a, bmm_kernel(g, bv, false, !*trans_b));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G  (or Gᵀ · A when B was transposed)
                    let gb = if *trans_b {
                        bmm_kernel(g, av, true, false)
                    } else {
                        bmm_kernel(av, g, true, false)
                    };
                    acc(*b, gb);
                }
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*x)).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Log1p(x) => acc(*x, g / &self.value(*x).mapv(|v| 1.0 + v)),
            Op::Clamp(x, c) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*x)).for_each(|d, &v| {
                    if v.abs() > *c {
                        *d = 0.0
                    }
                });
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = g * y;
                let last = Axis(y.ndim() - 1);
                Zip::from(gx.lanes_mut(last))
                    .and(y.lanes(last))
                    .and(g.lanes(last))
                    .for_each(|mut out, yl, gl| {
                        let s = yl.dot(&gl);
                        Zip::from(&mut out).and(&yl).for_each(|o, &yy| *o -= yy * s);
                    });
                acc(*x, gx);
            }
            Op::Standardize { x, eps, sqrt_var, axis } => {
                acc(*x, standardize_backward(self.value(*x), g, *eps, *sqrt_var, *axis))
            }
            Op::L2Rescale { x, scale, eps } => {
                let xv = self.value(*x);
                let last = Axis(xv.ndim() - 1);
                let mut gx = g.clone();
                Zip::from(gx.lanes_mut(last))
                    .and(xv.lanes(last))
                    .for_each(|mut gl, vl| {
                        let n = vl.dot(&vl).sqrt();
                        let d = n + eps;
                        let vg = vl.dot(&gl);
                        let coef = if n > 0.0 { scale * vg / (n * d * d) } else { 0.0 };
                        Zip::from(&mut gl)
                            .and(&vl)
                            .for_each(|gi, &vi| *gi = scale * *gi / d - coef * vi);
                    });
                acc(*x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(
                    *x,
                    g.as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap(),
                );
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned());
            }
            Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let n = shape[*axis] as f64;
                let expanded = g.clone().insert_axis(Axis(*axis));
                let gx = expanded.broadcast(IxDyn(&shape)).unwrap().mapv(|v| v / n);
                acc(*x, gx);
            }
            Op::Rfft(x) => {
                let n = *self.shape(*x).last().unwrap();
                acc(*x, fft::rfft_adjoint_last(g, n));
            }
            Op::Irfft(spec) => acc(*spec, fft::irfft_adjoint_last(g)),
            Op::BandMask { wc, ss, bin_band } => {
                let wcv = self.value(*wc);
                let ssv = self.value(*ss);
                let (b, c) = (wcv.shape()[0], wcv.shape()[1]);
                let mut gwc = ArrayD::zeros(wcv.raw_dim());
                let mut gss = ArrayD::zeros(ssv.raw_dim());
                for bi in 0..b {
                    for ci in 0..c {
                        for (k, band) in bin_band.iter().enumerate() {
                            if let Some(band) = band {
                                let gk = g[[bi, ci, k]];
                                gwc[[bi, ci]] += gk * ssv[[bi, *band]];
                                gss[[bi, *band]] += gk * wcv[[bi, ci]];
                            }
                        }
                    }
                }
                acc(*wc, gwc);
                acc(*ss, gss);
            }
            Op::SpectrumScale(spec, mask) => {
                let sv = self.value(*spec);
                let mv = self.value(*mask);
                let last = Axis(sv.ndim() - 1);
                if self.rg(*spec) {
                    let mut gs = g.clone();
                    Zip::from(gs.lanes_mut(last))
                        .and(mv)
                        .for_each(|mut pair, &w| pair.mapv_inplace(|v| v * w));
                    acc(*spec, gs);
                }
                if self.rg(*mask) {
                    let mut gm = ArrayD::zeros(mv.raw_dim());
                    Zip::from(&mut gm)
                        .and(g.lanes(last))
                        .and(sv.lanes(last))
                        .for_each(|o, gl, sl| *o = gl.dot(&sl));
                    acc(*mask, gm);
                }
            }
            Op::BandEnergy(spec, bins) => {
                let sv = self.value(*spec);
                let nd = sv.ndim();
                let f = sv.shape()[nd - 2];
                let src = sv.as_standard_layout();
                let src = src.as_slice().unwrap();
                let gflat = g.as_standard_layout();
                let gflat = gflat.as_slice().unwrap();
                let nb = bins.len();
                let mut out = vec![0.0; src.len()];
                for r in 0..src.len() / (2 * f) {
                    for (bi, &(lo, hi)) in bins.iter().enumerate() {
                        let gv = gflat[r * nb + bi];
                        for j in 2 * lo..2 * hi {
                            let p = r * 2 * f + j;
                            out[p] += 2.0 * src[p] * gv;
                        }
                    }
                }
                acc(*spec, ArrayD::from_shape_vec(sv.raw_dim(), out).unwrap());
            }
            Op::BinMagnitude(spec, sel) => {
                let sv = self.value(*spec);
                let nd = sv.ndim();
                let f = sv.shape()[nd - 2];
                let src = sv.as_standard_layout();
                let src = src.as_slice().unwrap();
                let gflat = g.as_standard_layout();
                let gflat = gflat.as_slice().unwrap();
                let ns = sel.len();
                let mut out = vec![0.0; src.len()];
                for r in 0..src.len() / (2 * f) {
                    for (si, &k) in sel.iter().enumerate() {
                        let p = r * 2 * f + 2 * k;
                        let m = src[p].hypot(src[p + 1]);
                        if m > 0.0 {
                            let gv = gflat[r * ns + si];
                            out[p] += gv * src[p] / m;
                            out[p + 1] += gv * src[p + 1] / m;
                        }
                    }
                }
                acc(*spec, ArrayD::from_shape_vec(sv.raw_dim(), out).unwrap());
            }
            Op::Nll { p, labels, floor } => {
                let pv = self.value(*p);
                let gs = g.iter().next().copied().unwrap_or(0.0);
                let b = labels.len() as f64;
                let mut gp = ArrayD::zeros(pv.raw_dim());
                for (i, &y) in labels.iter().enumerate() {
                    let q = pv[[i, y]];
                    if q > *floor {
                        gp[[i, y]] = -gs / (b * q);
                    }
                }
                acc(*p, gp);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter bound into `graph` (zeros if unused).
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out: Vec<_> = graph
            .param_vars()
            .map(|(p, v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(graph.value(v).raw_dim()));
                (p, g)
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn as_rows(a: &ArrayD<f64>) -> Array2<f64> {
    let last = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / last.max(1);
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order((rows, last))
        .unwrap()
}

pub(crate) fn softmax_last_inplace(a: &mut ArrayD<f64>) {
    let last = Axis(a.ndim() - 1);
    for mut row in a.lanes_mut(last) {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn bmm_kernel(a: &ArrayD<f64>, b: &ArrayD<f64>, trans_a: bool, trans_b: bool) -> ArrayD<f64> {
    assert_eq!(a.ndim(), 3, "bmm: rank-3 operands");
    assert_eq!(b.ndim(), 3, "bmm: rank-3 operands");
    let n = a.shape()[0];
    assert_eq!(n, b.shape()[0], "bmm: batch mismatch");
    fn view(x: &ArrayD<f64>, i: usize, t: bool) -> ArrayView2<'_, f64> {
        let v = x.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
        if t {
            v.reversed_axes()
        } else {
            v
        }
    }
    let first = view(a, 0, trans_a).dot(&view(b, 0, trans_b));
    let (p, r) = first.dim();
    let mut out = ArrayD::zeros(IxDyn(&[n, p, r]));
    out.index_axis_mut(Axis(0), 0).assign(&first);
    for i in 1..n {
        let prod = view(a, i, trans_a).dot(&view(b, i, trans_b));
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    out
}

fn stat_lanes_axis(a: &ArrayD<f64>, axis: StatAxis) -> Axis {
    match axis {
        StatAxis::Last => Axis(a.ndim() - 1),
        StatAxis::First => Axis(0),
    }
}

fn lane_stats(lane: &ndarray::ArrayView1<f64>, eps: f64, sqrt_var: bool) -> (f64, f64, f64) {
    let n = lane.len() as f64;
    let mean = lane.sum() / n;
    let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let denom = if sqrt_var { (var + eps).sqrt() } else { sd + eps };
    (mean, sd, denom)
}

pub(crate) fn standardize_kernel(x: &ArrayD<f64>, eps: f64, sqrt_var: bool, axis: StatAxis) -> ArrayD<f64> {
    let ax = stat_lanes_axis(x, axis);
    let mut out = x.clone();
    for mut lane in out.lanes_mut(ax) {
        let (mean, _, denom) = lane_stats(&lane.view(), eps, sqrt_var);
        lane.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

fn standardize_backward(x: &ArrayD<f64>, g: &ArrayD<f64>, eps: f64, sqrt_var: bool, axis: StatAxis) -> ArrayD<f64> {
    let ax = stat_lanes_axis(x, axis);
    let mut gx = g.clone();
    Zip::from(gx.lanes_mut(ax)).and(x.lanes(ax)).for_each(|mut gl, xl| {
        let n = xl.len() as f64;
        let (mean, sd, d) = lane_stats(&xl, eps, sqrt_var);
        let gmean = gl.sum() / n;
        let gxc: f64 = gl.iter().zip(xl.iter()).map(|(g, x)| g * (x - mean)).sum();
        // d(denom)/d(x_j) = c * (x_j - mean)
        let c = if sqrt_var {
            1.0 / (n * d)
        } else if sd > 0.0 {
            1.0 / (n * sd)
        } else {
            0.0
        };
        let coef = gxc * c / (d * d);
        Zip::from(&mut gl)
            .and(&xl)
            .for_each(|gi, &xi| *gi = (*gi - gmean) / d - coef * (xi - mean));
    });
    gx
}
