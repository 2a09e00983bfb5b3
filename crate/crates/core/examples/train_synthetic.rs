//! Trains the ensemble on the default synthetic set and reports test metrics.
//!
//! `cargo run --release --example train_synthetic -- [epochs]`

use std::time::Instant;

use lel::data::{split_trials, synth_dataset, SplitName, SynthSpec};
use lel::training::{evaluate, train, TrainConfig};

fn main() -> lel::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(100, |e| e.parse().expect("epochs must be an integer"));
    let spec = SynthSpec::default();
    let set = synth_dataset(&spec)?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let split = split_trials(&set, cfg.ratios, cfg.seed)?;
    let start = Instant::now();
    let out = train(&set, &split, &cfg)?;
    for e in &out.report.epochs {
        println!(
            "epoch {:3}  train {:.4}  val {:.4}  acc {:.3}  w {:.3?}",
            e.epoch, e.train_loss, e.val_loss, e.val_acc, e.w
        );
    }
    let test = evaluate(&out.model, &set, &split.indices(&set, SplitName::Test))?;
    println!(
        "best epoch {}  trained in {:.1?}",
        out.report.best_epoch,
        start.elapsed()
    );
    println!(
        "test accuracy {:.4}  macro F1 {:.4}",
        test.fused.accuracy, test.fused.macro_f1
    );
    for (name, m) in &test.branches {
        println!("  {name:<10} {:.4}", m.accuracy);
    }
    Ok(())
}
