//! Verifies a freshly initialized ensemble: weight norms, per-stage
//! estimates against declared constants, path composition and gradients.

use lel::data::{synth_dataset, SynthSpec};
use lel::ensemble::{Model, ModelConfig};
use lel::verification::{probe_pool, verify_model, VerifyConfig};

fn main() -> lel::Result<()> {
    let spec = SynthSpec {
        n_channels: 4,
        n_samples: 256,
        trials_per_class: 4,
        ..SynthSpec::default()
    };
    let set = synth_dataset(&spec)?;
    let model = Model::new(ModelConfig::new(4, 256, spec.n_classes, spec.sampling_rate))?;
    let windows = set.batch(&(0..16).collect::<Vec<_>>()).data.into_dyn();
    let pool = probe_pool(&windows, 0);
    let mut cfg = VerifyConfig::default();
    cfg.probe.n_pairs = 200;
    let report = verify_model(&model, &pool, &cfg)?;
    print!("{}", report.to_table());
    println!("pass: {}", report.pass());
    Ok(())
}
