//! Real-input DFT kernels and their adjoints.
//!
//! Spectra are stored as real arrays with a trailing axis of length 2
//! (re, im), so a `[.., T]` signal maps to a `[.., T/2 + 1, 2]` spectrum.
//! The forward transform is unnormalized; the inverse carries the `1/T`.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Number of half-spectrum bins for a real signal of length `n`.
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Unnormalized half-spectrum of a real row.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward_plan(n).process(&mut buf);
    buf.truncate(half_len(n));
    buf
}

/// Inverse of [`rfft`]. The imaginary parts of the DC bin (and the Nyquist
/// bin for even `n`) are ignored, as for any Hermitian reconstruction.
pub fn irfft(spec: &[Complex64], n: usize) -> Vec<f64> {
    let f = half_len(n);
    assert_eq!(spec.len(), f, "irfft: spectrum length must be n/2 + 1");
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[0] = Complex64::new(spec[0].re, 0.0);
    for k in 1..f {
        if 2 * k == n {
            full[k] = Complex64::new(spec[k].re, 0.0);
        } else {
            full[k] = spec[k];
            full[n - k] = spec[k].conj();
        }
    }
    inverse_plan(n).process(&mut full);
    let scale = 1.0 / n as f64;
    full.iter().map(|c| c.re * scale).collect()
}

/// Adjoint of [`rfft`] viewed as a real-linear map `R^n -> R^{2F}`.
pub fn rfft_adjoint(g: &[Complex64], n: usize) -> Vec<f64> {
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..g.len()].copy_from_slice(g);
    inverse_plan(n).process(&mut full);
    full.iter().map(|c| c.re).collect()
}

/// Adjoint of [`irfft`] viewed as a real-linear map `R^{2F} -> R^n`.
pub fn irfft_adjoint(g: &[f64]) -> Vec<Complex64> {
    let n = g.len();
    let mut spec = rfft(g);
    let scale = 1.0 / n as f64;
    for (k, c) in spec.iter_mut().enumerate() {
        let weight = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
        *c *= weight * scale;
        if k == 0 || 2 * k == n {
            // the imaginary input at these bins is discarded by irfft
            c.im = 0.0;
        }
    }
    spec
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("rank >= 1");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    (rows, last)
}

/// Row-wise [`rfft`] over the last axis: `[.., T] -> [.., F, 2]`.
pub fn rfft_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x = x.as_standard_layout();
    let (rows, n) = split_rows(x.shape());
    let f = half_len(n);
    let src = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(rows * f * 2);
    for r in 0..rows {
        for c in rfft(&src[r * n..(r + 1) * n]) {
            out.push(c.re);
            out.push(c.im);
        }
    }
    let mut shape = x.shape()[..x.ndim() - 1].to_vec();
    shape.extend([f, 2]);
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape")
}

fn complex_rows(spec: &ArrayD<f64>) -> (Vec<usize>, usize, Vec<Complex64>) {
    let spec = spec.as_standard_layout();
    let nd = spec.ndim();
    assert!(
        nd >= 2 && spec.shape()[nd - 1] == 2,
        "spectrum must end in a (re, im) axis"
    );
    let f = spec.shape()[nd - 2];
    let lead = spec.shape()[..nd - 2].to_vec();
    let data = spec
        .as_slice()
        .expect("standard layout")
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect();
    (lead, f, data)
}

/// Row-wise [`irfft`]: `[.., F, 2] -> [.., n]`.
pub fn irfft_last(spec: &ArrayD<f64>, n: usize) -> ArrayD<f64> {
    let (lead, f, data) = complex_rows(spec);
    let mut out = Vec::with_capacity(data.len() / f * n);
    for row in data.chunks_exact(f) {
        out.extend(irfft(row, n));
    }
    let mut shape = lead;
    shape.push(n);
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape")
}

/// Row-wise [`rfft_adjoint`]: `[.., F, 2] -> [.., n]`.
pub fn rfft_adjoint_last(g: &ArrayD<f64>, n: usize) -> ArrayD<f64> {
    let (lead, f, data) = complex_rows(g);
    let mut out = Vec::with_capacity(data.len() / f * n);
    for row in data.chunks_exact(f) {
        out.extend(rfft_adjoint(row, n));
    }
    let mut shape = lead;
    shape.push(n);
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape")
}

/// Row-wise [`irfft_adjoint`]: `[.., n] -> [.., F, 2]`.
pub fn irfft_adjoint_last(g: &ArrayD<f64>) -> ArrayD<f64> {
    let g = g.as_standard_layout();
    let (rows, n) = split_rows(g.shape());
    let f = half_len(n);
    let src = g.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(rows * f * 2);
    for r in 0..rows {
        for c in irfft_adjoint(&src[r * n..(r + 1) * n]) {
            out.push(c.re);
            out.push(c.im);
        }
    }
    let mut shape = g.shape()[..g.ndim() - 1].to_vec();
    shape.extend([f, 2]);
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..half_len(n))
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let th = -2.0 * PI * (k * t) as f64 / n as f64;
                        Complex64::new(v * th.cos(), v * th.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let x = vec![2.5; 16];
        let s = rfft(&x);
        assert!((s[0].re - 2.5 * 16.0).abs() < 1e-12);
        for c in &s[1..] {
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64).sin()).collect();
        for (a, b) in rfft(&x).iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn bin_aligned_cosine_concentrates() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * 5.0 * t as f64 / n as f64).cos()).collect();
        let s = rfft(&x);
        for (k, c) in s.iter().enumerate() {
            if k == 5 {
                assert!((c.re - n as f64 / 2.0).abs() < 1e-10);
            } else {
                assert!(c.norm() < 1e-10, "bin {k} = {c}");
            }
        }
    }

    #[test]
    fn round_trip_even_and_odd() {
        for n in [2usize, 7, 64, 101] {
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos() + 0.1 * i as f64).collect();
            let y = irfft(&rfft(&x), n);
            let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }

    fn dot_c(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        for n in [8usize, 9] {
            let f = half_len(n);
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).sin()).collect();
            let g: Vec<Complex64> = (0..f)
                .map(|k| Complex64::new((k as f64).cos(), (k as f64 * 0.7).sin()))
                .collect();
            // <rfft x, g> == <x, rfft^T g>
            let lhs = dot_c(&rfft(&x), &g);
            let rhs: f64 = x.iter().zip(rfft_adjoint(&g, n)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            // <irfft g, x> == <g, irfft^T x>
            let lhs: f64 = irfft(&g, n).iter().zip(&x).map(|(a, b)| a * b).sum();
            let rhs = dot_c(&g, &irfft_adjoint(&x));
            assert!((lhs - rhs).abs() < 1e-10, "n={n}: {lhs} vs {rhs}");
        }
    }
}
