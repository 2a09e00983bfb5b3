//! Band extraction with adaptive channel/spectral weighting.
//!
//! The input spectrum is split into the configured bands, per-band energies
//! drive two small perceptrons that produce channel weights (sigmoid) and
//! band weights (softmax), both rescaled to an ℓ2 norm below `L_s`. The
//! weighted band slices are scattered back into an otherwise zero spectrum,
//! inverted, added to the input and layer-normalized over time.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::Rng;

use crate::autograd::{sigmoid, Graph, StatAxis, Var};
use crate::data::BandSpec;
use crate::error::{LelError, Result};
use crate::fft;
use crate::params::{Constraint, Linear, ParamId, ParamStore};

/// ε of the ℓ2 rescale.
pub const RESCALE_EPS: f64 = 1e-8;
/// ε of the output layer norm (inside the square root).
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Half-spectrum of a batch with its band layout.
#[derive(Debug, Clone)]
pub struct SpectralFrame {
    /// `[B × C × F_full]`
    pub coeffs: Array3<Complex64>,
    pub band_bins: Vec<(usize, usize)>,
    /// `[B × C × |bands|]`
    pub band_energy: Array3<f64>,
}

impl SpectralFrame {
    pub fn compute(x: &Array3<f64>, band_bins: &[(usize, usize)]) -> Self {
        let coeffs = rfft_forward(x);
        let (_, band_energy) = band_slice_energy(&coeffs, band_bins);
        Self {
            coeffs,
            band_bins: band_bins.to_vec(),
            band_energy,
        }
    }

    pub fn full_len(&self) -> usize {
        self.coeffs.shape()[2]
    }
}

/// Real-input half spectrum of every `(b, c)` row.
pub fn rfft_forward(x: &Array3<f64>) -> Array3<Complex64> {
    let (b, c, t) = x.dim();
    let f = fft::half_len(t);
    let mut out = Array3::zeros((b, c, f));
    for bi in 0..b {
        for ci in 0..c {
            let row: Vec<f64> = x.slice(ndarray::s![bi, ci, ..]).to_vec();
            for (k, v) in fft::rfft(&row).into_iter().enumerate() {
                out[[bi, ci, k]] = v;
            }
        }
    }
    out
}

/// Band slices `F_b = F[.., lo:hi]` and energies `E[b, c, β] = Σ_k |F_β[k]|²`.
pub fn band_slice_energy(coeffs: &Array3<Complex64>, bins: &[(usize, usize)]) -> (Vec<Array3<Complex64>>, Array3<f64>) {
    let (b, c, _) = coeffs.dim();
    let slices: Vec<Array3<Complex64>> = bins
        .iter()
        .map(|&(lo, hi)| coeffs.slice(ndarray::s![.., .., lo..hi]).to_owned())
        .collect();
    let mut energy = Array3::zeros((b, c, bins.len()));
    for (beta, sl) in slices.iter().enumerate() {
        for bi in 0..b {
            for ci in 0..c {
                energy[[bi, ci, beta]] = sl.slice(ndarray::s![bi, ci, ..]).iter().map(|z| z.norm_sqr()).sum();
            }
        }
    }
    (slices, energy)
}

/// `L · v / (‖v‖₂ + ε)`.
pub fn lipschitz_rescale(v: &[f64], l: f64, eps: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| l * x / (n + eps)).collect()
}

/// Scatters weighted band slices into a zero spectrum of `⌊T/2⌋ + 1` bins
/// and inverts it. `wc: [B × C]`, `ss: [B × |bands|]`.
pub fn reconstruct(
    slices: &[Array3<Complex64>],
    bins: &[(usize, usize)],
    wc: &Array2<f64>,
    ss: &Array2<f64>,
    n_samples: usize,
) -> Result<Array3<f64>> {
    for (i, a) in bins.iter().enumerate() {
        for b in &bins[i + 1..] {
            if a.0 < b.1 && b.0 < a.1 {
                return Err(LelError::Contract(format!("overlapping band bins {a:?} and {b:?}")));
            }
        }
    }
    let (b, c) = wc.dim();
    let f = fft::half_len(n_samples);
    let mut out = Array3::zeros((b, c, n_samples));
    for bi in 0..b {
        for ci in 0..c {
            let mut spec = vec![Complex64::new(0.0, 0.0); f];
            for (beta, (&(lo, hi), sl)) in bins.iter().zip(slices).enumerate() {
                let w = wc[[bi, ci]] * ss[[bi, beta]];
                for k in lo..hi {
                    spec[k] = sl[[bi, ci, k - lo]] * w;
                }
            }
            for (t, v) in fft::irfft(&spec, n_samples).into_iter().enumerate() {
                out[[bi, ci, t]] = v;
            }
        }
    }
    Ok(out)
}

/// Two-layer perceptron `d → hidden → d` with a rectifier in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, Some(bound), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, Some(bound), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }

    fn forward_plain(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let lin = |l: &Linear, x: &Array2<f64>| -> Array2<f64> {
            let w = store
                .value(l.weight)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let b = store
                .value(l.bias)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            x.dot(&w) + b
        };
        let h = lin(&self.fc1, x).mapv(|v| v.max(0.0));
        lin(&self.fc2, &h)
    }
}

/// Parameters and static layout of one band-extraction module.
#[derive(Debug, Clone)]
pub struct Lgcbe {
    pub mlp_c: Mlp,
    pub mlp_s: Mlp,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// Bound on the ℓ2 norm of the rescaled weights.
    pub l_lip: f64,
    pub eps: f64,
    pub bins: Vec<(usize, usize)>,
    pub n_channels: usize,
    pub n_samples: usize,
}

pub struct LgcbeVars {
    pub out: Var,
    pub energy: Var,
    pub spectrum: Var,
    pub channel_weights: Var,
    pub band_weights: Var,
}

/// Plain-array results of [`lgcbe_forward`].
#[derive(Debug, Clone)]
pub struct LgcbeOutput {
    /// `[B × C × T]`
    pub out: Array3<f64>,
    /// `[B × C × |bands|]`
    pub energy: Array3<f64>,
    /// Concatenated band slices `[B × C × Σ F_b]`.
    pub band_features: Array3<Complex64>,
}

impl Lgcbe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        bands: &[BandSpec],
        n_channels: usize,
        n_samples: usize,
        sampling_rate: f64,
        l_lip: f64,
        l_linear: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(l_lip > 0.0) {
            return Err(LelError::ParameterDomain(format!("L_s must be positive, got {l_lip}")));
        }
        let bins = crate::data::band_bins(bands, n_samples, sampling_rate)?;
        let hidden = n_channels.max(16);
        let mlp_c = Mlp::new(store, &format!("{name}.mlp_c"), n_channels, hidden, l_linear, rng);
        let mlp_s = Mlp::new(store, &format!("{name}.mlp_s"), bins.len(), hidden, l_linear, rng);
        let ln_gain = store.add(
            format!("{name}.ln.gain"),
            ArrayD::ones(IxDyn(&[n_samples])),
            Constraint::None,
        );
        let ln_bias = store.add(
            format!("{name}.ln.bias"),
            ArrayD::zeros(IxDyn(&[n_samples])),
            Constraint::None,
        );
        Ok(Self {
            mlp_c,
            mlp_s,
            ln_gain,
            ln_bias,
            l_lip,
            eps: RESCALE_EPS,
            bins,
            n_channels,
            n_samples,
        })
    }

    /// Band index of every half-spectrum bin (None outside all bands).
    pub fn bin_band(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; fft::half_len(self.n_samples)];
        for (beta, &(lo, hi)) in self.bins.iter().enumerate() {
            out[lo..hi].iter_mut().for_each(|s| *s = Some(beta));
        }
        out
    }

    /// Channel weights `W_c` (sigmoid) and band weights `S_s` (softmax)
    /// from energies `E: [B × C × |bands|]`. The perceptrons see `ln(1 + E)`;
    /// raw energies scale with `T²` and saturate the sigmoid.
    pub fn weights_graph(&self, g: &mut Graph, store: &ParamStore, energy: Var) -> Result<(Var, Var)> {
        if g.value(energy).iter().any(|v| !v.is_finite()) {
            return Err(LelError::numeric("lgcbe.adaptive_weights", "band energy is not finite"));
        }
        let compressed = g.log1p(energy);
        let per_channel = g.mean_axis(compressed, 2);
        let per_band = g.mean_axis(compressed, 1);
        let wc = self.mlp_c.forward(g, store, per_channel);
        let wc = g.sigmoid(wc);
        let ss = self.mlp_s.forward(g, store, per_band);
        let ss = g.softmax(ss);
        Ok((wc, ss))
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<LgcbeVars> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.n_channels || shape[2] != self.n_samples {
            return Err(LelError::Shape(format!(
                "lgcbe expects [B, {}, {}], got {shape:?}",
                self.n_channels, self.n_samples
            )));
        }
        let spectrum = g.rfft(x);
        let energy = g.band_energy(spectrum, self.bins.clone());
        let (wc, ss) = self.weights_graph(g, store, energy)?;
        let wct = g.l2_rescale(wc, self.l_lip, self.eps);
        let sst = g.l2_rescale(ss, self.l_lip, self.eps);
        let mask = g.band_mask(wct, sst, self.bin_band());
        let weighted = g.spectrum_scale(spectrum, mask);
        let x_time = g.irfft(weighted, self.n_samples);
        let x_res = g.add(x, x_time);
        let normed = g.standardize(x_res, LAYER_NORM_EPS, true, StatAxis::Last);
        let gain = g.param(store, self.ln_gain);
        let bias = g.param(store, self.ln_bias);
        let out = g.mul_last_vec(normed, gain);
        let out = g.add_last_vec(out, bias);
        Ok(LgcbeVars {
            out,
            energy,
            spectrum,
            channel_weights: wct,
            band_weights: sst,
        })
    }
}

/// `(W_c, S_s)` for plain energies; see [`Lgcbe::weights_graph`].
pub fn adaptive_weights(
    energy: &Array3<f64>,
    module: &Lgcbe,
    store: &ParamStore,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if energy.iter().any(|v| !v.is_finite()) {
        return Err(LelError::numeric("lgcbe.adaptive_weights", "band energy is not finite"));
    }
    let compressed = energy.mapv(f64::ln_1p);
    let per_channel = compressed.mean_axis(Axis(2)).unwrap();
    let per_band = compressed.mean_axis(Axis(1)).unwrap();
    let wc = module.mlp_c.forward_plain(store, &per_channel).mapv(sigmoid);
    let mut ss = module.mlp_s.forward_plain(store, &per_band).into_dyn();
    crate::autograd::softmax_last_inplace(&mut ss);
    Ok((wc, ss.into_dimensionality().unwrap()))
}

/// Full module forward on plain arrays.
pub fn lgcbe_forward(x: &Array3<f64>, module: &Lgcbe, store: &ParamStore) -> Result<LgcbeOutput> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone().into_dyn());
    let vars = module.forward_graph(&mut g, store, xv)?;
    let out = g.value(vars.out).clone().into_dimensionality().unwrap();
    let energy = g.value(vars.energy).clone().into_dimensionality().unwrap();
    let coeffs = rfft_forward(x);
    let (slices, _) = band_slice_energy(&coeffs, &module.bins);
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    let band_features = ndarray::concatenate(Axis(2), &views).map_err(|e| LelError::Shape(e.to_string()))?;
    Ok(LgcbeOutput {
        out,
        energy,
        band_features,
    })
}

/// Rescaled weight norms per sample, `(‖W̃_c‖, ‖S̃_s‖)`.
pub fn rescaled_weight_norms(wc: &Array2<f64>, ss: &Array2<f64>, l: f64, eps: f64) -> Vec<(f64, f64)> {
    wc.rows()
        .into_iter()
        .zip(ss.rows())
        .map(|(a, b)| {
            let na = Array1::from(lipschitz_rescale(&a.to_vec(), l, eps));
            let nb = Array1::from(lipschitz_rescale(&b.to_vec(), l, eps));
            (na.dot(&na).sqrt(), nb.dot(&nb).sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BandName, DEFAULT_BANDS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn module(c: usize, t: usize, fs: f64) -> (Lgcbe, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Lgcbe::new(&mut store, "b", &DEFAULT_BANDS, c, t, fs, 1.0, 1.0, &mut rng).unwrap();
        (m, store)
    }

    fn zero_mlps(m: &Lgcbe, store: &mut ParamStore) {
        for l in [m.mlp_c.fc1, m.mlp_c.fc2, m.mlp_s.fc1, m.mlp_s.fc2] {
            store.value_mut(l.weight).fill(0.0);
            store.value_mut(l.bias).fill(0.0);
        }
    }

    #[test]
    fn rescale_examples() {
        let v = lipschitz_rescale(&[2.0, 0.0], 1.0, 0.0);
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert_eq!(lipschitz_rescale(&[0.0, 0.0, 0.0], 1.0, 1e-8), vec![0.0; 3]);
        let v = lipschitz_rescale(&[0.6, 0.8], 10.0, 1e-8);
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((n - 10.0 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn energy_of_aligned_cosine_is_alpha_only() {
        let (t, fs) = (1000, 200.0);
        let bins = crate::data::band_bins(&DEFAULT_BANDS, t, fs).unwrap();
        let mut x = Array3::zeros((1, 1, t));
        for i in 0..t {
            x[[0, 0, i]] = (TAU * 10.0 * i as f64 / fs).cos();
        }
        let frame = SpectralFrame::compute(&x, &bins);
        assert_eq!(frame.full_len(), 501);
        let e = &frame.band_energy;
        // bin 50, amplitude T/2
        assert!((e[[0, 0, 2]] - 250_000.0).abs() < 1e-6);
        for beta in [0, 1, 3, 4] {
            assert!(e[[0, 0, beta]] < 1e-12);
        }
        let zero = SpectralFrame::compute(
            &Array3::zeros((2, 3, 64)),
            &crate::data::band_bins(&DEFAULT_BANDS, 64, 128.0).unwrap(),
        );
        assert!(zero.band_energy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_energy_bounded_by_parseval() {
        let t = 256;
        let bins = crate::data::band_bins(&DEFAULT_BANDS, t, 128.0).unwrap();
        let x = Array3::from_shape_fn((2, 3, t), |(b, c, i)| ((b * 7 + c * 3 + i) as f64 * 0.913).sin());
        let frame = SpectralFrame::compute(&x, &bins);
        for b in 0..2 {
            for c in 0..3 {
                let row = x.slice(ndarray::s![b, c, ..]);
                // Σ_k over the half spectrum with Hermitian weights equals T · Σ x²
                let time = t as f64 * row.iter().map(|v| v * v).sum::<f64>();
                let spec = frame.coeffs.slice(ndarray::s![b, c, ..]);
                let half: f64 = spec
                    .iter()
                    .enumerate()
                    .map(|(k, z)| {
                        if k == 0 || 2 * k == t {
                            z.norm_sqr()
                        } else {
                            2.0 * z.norm_sqr()
                        }
                    })
                    .sum();
                assert!((half - time).abs() / time < 1e-10);
                let bands: f64 = (0..5).map(|beta| frame.band_energy[[b, c, beta]]).sum();
                let total_half: f64 = spec.iter().map(|z| z.norm_sqr()).sum();
                assert!(bands <= total_half + 1e-9);
            }
        }
    }

    #[test]
    fn zero_mlps_give_half_and_uniform() {
        let (m, mut store) = module(4, 64, 128.0);
        zero_mlps(&m, &mut store);
        let e = Array3::from_shape_fn((2, 4, 5), |(a, b, c)| (a + b + c) as f64);
        let (wc, ss) = adaptive_weights(&e, &m, &store).unwrap();
        assert!(wc.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(ss.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn channel_permutation_equivariance() {
        let (m, store) = module(4, 64, 128.0);
        let e = Array3::from_shape_fn((1, 4, 5), |(_, c, b)| ((c * 5 + b) as f64 * 0.37).sin().abs() * 3.0);
        let (wc, ss) = adaptive_weights(&e, &m, &store).unwrap();
        let perm = [2, 0, 3, 1];
        let ep = Array3::from_shape_fn((1, 4, 5), |(_, c, b)| e[[0, perm[c], b]]);
        // MLP_c mixes channels, so relabel its input rows and output columns alongside
        let mut sp = store.clone();
        let w1 = store.value(m.mlp_c.fc1.weight).clone();
        let w2 = store.value(m.mlp_c.fc2.weight).clone();
        let b2 = store.value(m.mlp_c.fc2.bias).clone();
        for (i, &p) in perm.iter().enumerate() {
            for h in 0..w1.shape()[1] {
                sp.value_mut(m.mlp_c.fc1.weight)[[i, h]] = w1[[p, h]];
                sp.value_mut(m.mlp_c.fc2.weight)[[h, i]] = w2[[h, p]];
            }
            sp.value_mut(m.mlp_c.fc2.bias)[[i]] = b2[[p]];
        }
        let (wcp, ssp) = adaptive_weights(&ep, &m, &sp).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((wcp[[0, i]] - wc[[0, p]]).abs() < 1e-12);
        }
        for (a, b) in ss.iter().zip(ssp.iter()) {
            assert!((a - b).abs() < 1e-12, "band weights must ignore channel order");
        }
    }

    #[test]
    fn non_finite_energy_is_rejected() {
        let (m, store) = module(2, 64, 128.0);
        let mut e = Array3::zeros((1, 2, 5));
        e[[0, 1, 3]] = f64::NAN;
        assert!(matches!(
            adaptive_weights(&e, &m, &store),
            Err(LelError::NumericDomain { .. })
        ));
    }

    #[test]
    fn unit_weights_over_full_tiling_round_trip() {
        let t = 64;
        let bins = vec![(0, 10), (10, 20), (20, 33)];
        let x = Array3::from_shape_fn((2, 3, t), |(b, c, i)| ((b + 2 * c) as f64 + i as f64 * 0.31).cos());
        let coeffs = rfft_forward(&x);
        let (slices, _) = band_slice_energy(&coeffs, &bins);
        let y = reconstruct(&slices, &bins, &Array2::ones((2, 3)), &Array2::ones((2, 3)), t).unwrap();
        let err = (&y - &x).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        let scale = x.mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err / scale < 1e-8);
        let zero = reconstruct(&slices, &bins, &Array2::zeros((2, 3)), &Array2::ones((2, 3)), t).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_alpha_matches_band_filter() {
        let (t, fs) = (256, 128.0);
        let bins = crate::data::band_bins(&DEFAULT_BANDS, t, fs).unwrap();
        let x = Array3::from_shape_fn((1, 2, t), |(_, c, i)| {
            ((c + 1) as f64 * i as f64 * 0.173).sin() + (i as f64 * 0.45).cos()
        });
        let coeffs = rfft_forward(&x);
        let (slices, _) = band_slice_energy(&coeffs, &bins);
        let wc = ndarray::array![[0.5, 2.0]];
        let ss = ndarray::array![[0.0, 0.0, 1.0, 0.0, 0.0]];
        let y = reconstruct(&slices, &bins, &wc, &ss, t).unwrap();
        // oracle: zero every bin outside alpha, invert, scale
        let (lo, hi) = bins[2];
        for c in 0..2 {
            let mut sp = fft::rfft(&x.slice(ndarray::s![0, c, ..]).to_vec());
            for (k, z) in sp.iter_mut().enumerate() {
                if k < lo || k >= hi {
                    *z = Complex64::new(0.0, 0.0);
                }
            }
            let filt = fft::irfft(&sp, t);
            for i in 0..t {
                assert!((y[[0, c, i]] - wc[[0, c]] * filt[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlapping_bins_rejected() {
        let coeffs = Array3::zeros((1, 1, 33));
        let bins = vec![(0, 10), (5, 20)];
        let (slices, _) = band_slice_energy(&coeffs, &bins);
        let err = reconstruct(&slices, &bins, &Array2::ones((1, 1)), &Array2::ones((1, 2)), 64);
        assert!(matches!(err, Err(LelError::Contract(_))));
    }

    #[test]
    fn forward_shape_finiteness_and_determinism() {
        let (m, mut store) = module(4, 64, 128.0);
        zero_mlps(&m, &mut store);
        let x = Array3::from_shape_fn((2, 4, 64), |(b, c, i)| ((b * 31 + c * 7 + i) as f64 * 0.77).sin());
        let a = lgcbe_forward(&x, &m, &store).unwrap();
        let b = lgcbe_forward(&x, &m, &store).unwrap();
        assert_eq!(a.out.dim(), (2, 4, 64));
        assert!(a.out.iter().all(|v| v.is_finite()));
        assert_eq!(a.out, b.out);
        let total: usize = m.bins.iter().map(|(l, h)| h - l).sum();
        assert_eq!(a.band_features.dim(), (2, 4, total));
    }

    #[test]
    fn rescaled_norms_stay_below_bound() {
        let (m, store) = module(4, 64, 128.0);
        let x = Array3::from_shape_fn((3, 4, 64), |(b, c, i)| ((b * 13 + c * 5 + i) as f64 * 1.3).cos() * 4.0);
        let frame = SpectralFrame::compute(&x, &m.bins);
        let (wc, ss) = adaptive_weights(&frame.band_energy, &m, &store).unwrap();
        for (a, b) in rescaled_weight_norms(&wc, &ss, m.l_lip, m.eps) {
            assert!(a < m.l_lip && b < m.l_lip);
        }
        for row in ss.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(wc.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn band_name_display() {
        assert_eq!(BandName::Gamma.to_string(), "gamma");
    }
}
