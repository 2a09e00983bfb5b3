//! Invariants checked over randomized inputs.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

use lel::autograd::StatAxis;
use lel::data::{split_trials, synth_dataset, SplitName, SplitRatios, SynthSpec};
use lel::ensemble::{fuse, fusion_weights, Model, ModelConfig};
use lel::lgca::clamp_softmax;
use lel::lgcbe::lipschitz_rescale;
use lel::lgcn::lgcn_forward;
use lel::spectral::{spectral_norm_project, TRAIN_POWER_ITERS, TRAIN_POWER_TOL};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Array2<f64>> {
    (1usize..7, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))
}

fn simplex_rows(p: &Array2<f64>) -> bool {
    p.rows()
        .into_iter()
        .all(|r| r.iter().all(|v| *v >= 0.0) && (r.sum() - 1.0).abs() < 1e-9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clamped_attention_rows_are_bounded_simplices(
        scores in prop::collection::vec(-50.0f64..50.0, 2 * 3 * 3),
        c in 0.01f64..10.0,
    ) {
        let s = Array3::from_shape_vec((2, 3, 3), scores).unwrap();
        let a = clamp_softmax(&s, c);
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let min = row.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!(max / min <= (2.0 * c).exp() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn fusion_weights_form_a_simplex(alpha in prop::collection::vec(-30.0f64..30.0, 4)) {
        let w = fusion_weights(&alpha);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn fused_posterior_stays_on_simplex(
        alpha in prop::collection::vec(-5.0f64..5.0, 4),
        logits in prop::collection::vec(-10.0f64..10.0, 4 * 3 * 5),
    ) {
        let probs: Vec<Array2<f64>> = logits
            .chunks(15)
            .map(|c| {
                let mut p = Array2::from_shape_vec((3, 5), c.iter().map(|v| v.exp()).collect()).unwrap();
                for mut r in p.rows_mut() {
                    let s = r.sum();
                    r /= s;
                }
                p
            })
            .collect();
        let fused = fuse(&alpha, &probs).unwrap();
        prop_assert!(simplex_rows(&fused));
    }

    #[test]
    fn projection_never_exceeds_bound(w in sized_matrix(), bound in 0.05f64..4.0) {
        let p = spectral_norm_project(&w, bound, TRAIN_POWER_ITERS, TRAIN_POWER_TOL).unwrap();
        let m = DMatrix::from_row_iterator(p.nrows(), p.ncols(), p.iter().copied());
        let sigma = m.singular_values().max();
        prop_assert!(sigma <= bound * (1.0 + 1e-9), "σ = {sigma}, bound = {bound}");
    }

    #[test]
    fn rescale_norm_is_exact(v in prop::collection::vec(-100.0f64..100.0, 1..12), l in 0.1f64..20.0) {
        let eps = 1e-8;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let out = lipschitz_rescale(&v, l, eps);
        let on = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((on - l * n / (n + eps)).abs() <= 1e-12 * l.max(1.0));
        prop_assert!(on <= l);
    }

    #[test]
    fn lgcn_is_invariant_to_gain_scale(
        z in matrix(3, 4),
        gamma in prop::collection::vec(0.1f64..3.0, 4),
        s in 0.01f64..100.0,
    ) {
        let g = Array1::from(gamma);
        let beta = Array1::zeros(4);
        let a = lgcn_forward(&z, &g, &beta, 1.5, StatAxis::Last).unwrap();
        let b = lgcn_forward(&z, &(&g * s), &beta, 1.5, StatAxis::Last).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn splits_are_deterministic_and_disjoint(seed in any::<u64>(), split_seed in any::<u64>()) {
        let spec = SynthSpec {
            n_classes: 3,
            n_channels: 2,
            n_samples: 200,
            trials_per_class: 10,
            windows_per_trial: 2,
            seed,
            ..SynthSpec::default()
        };
        let set = synth_dataset(&spec).unwrap();
        let a = split_trials(&set, SplitRatios::default(), split_seed).unwrap();
        let b = split_trials(&set, SplitRatios::default(), split_seed).unwrap();
        prop_assert_eq!(&a, &b);
        a.audit(&set).unwrap();
        prop_assert!(a.train.is_disjoint(&a.val) && a.train.is_disjoint(&a.test) && a.val.is_disjoint(&a.test));
        let mut seen = vec![0usize; set.len()];
        for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
            for i in a.indices(&set, name) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|c| *c == 1));
    }

    #[test]
    fn model_posteriors_are_simplices(seed in any::<u64>(), data in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 200)) {
        let mut cfg = ModelConfig::new(3, 200, 4, 200.0);
        cfg.seed = seed;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.hidden = 16;
        let model = Model::new(cfg).unwrap();
        let x = Array3::from_shape_vec((2, 3, 200), data).unwrap();
        let pred = model.predict(&x).unwrap();
        prop_assert!(simplex_rows(&pred.fused));
        for b in &pred.branches {
            prop_assert!(simplex_rows(b));
        }
    }
}
