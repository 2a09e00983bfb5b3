//! Trains on a small synthetic set, then classifies a continuous recording
//! window by window and reports latency.

use lel::data::{split_trials, synth_dataset, SynthSpec};
use lel::stream::stream_evaluate;
use lel::training::{train, TrainConfig};
use ndarray::{concatenate, Axis};

fn main() -> lel::Result<()> {
    let spec = SynthSpec {
        n_channels: 4,
        n_samples: 256,
        trials_per_class: 30,
        ..SynthSpec::default()
    };
    let set = synth_dataset(&spec)?;
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let split = split_trials(&set, cfg.ratios, cfg.seed)?;
    let out = train(&set, &split, &cfg)?;

    // a recording built from consecutive windows of class 2
    let windows: Vec<_> = set
        .recordings
        .iter()
        .filter(|r| r.label == 2)
        .take(8)
        .map(|r| r.samples.view())
        .collect();
    let recording = concatenate(Axis(1), &windows).map_err(|e| lel::LelError::Shape(e.to_string()))?;
    let s = stream_evaluate(&out.model, &recording, 256, 128)?;
    for row in &s.rows {
        println!(
            "window {:2} @ {:5}: class {} ({:.2} ms)",
            row.index, row.start, row.predicted, row.latency_ms
        );
    }
    println!(
        "majority class {:?}; latency mean {:.2} ms, p95 {:.2} ms",
        s.majority(),
        s.latency.mean_ms,
        s.latency.p95_ms
    );
    Ok(())
}
