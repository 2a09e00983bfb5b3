//! Per-class connectivity matrices and fusion weights of a trained model.

use lel::data::{split_trials, synth_dataset, SplitName, SynthSpec};
use lel::export::{connectivity, fusion_weights, DEFAULT_ATTENTION_BLEND};
use lel::training::{train, TrainConfig};

fn main() -> lel::Result<()> {
    let set = synth_dataset(&SynthSpec {
        n_channels: 4,
        n_samples: 256,
        trials_per_class: 20,
        ..SynthSpec::default()
    })?;
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let split = split_trials(&set, cfg.ratios, cfg.seed)?;
    let out = train(&set, &split, &cfg)?;
    let test = split.indices(&set, SplitName::Test);
    for (k, m) in connectivity(&out.model, &set, &test, DEFAULT_ATTENTION_BLEND)?
        .into_iter()
        .enumerate()
    {
        match m {
            Some(m) => println!("class {k}\n{m:.3}"),
            None => println!("class {k}: no test windows"),
        }
    }
    let w = fusion_weights(&out.model);
    for (name, v) in w.branches.iter().zip(&w.weights) {
        println!("{name:<16} {v:.4}");
    }
    Ok(())
}
