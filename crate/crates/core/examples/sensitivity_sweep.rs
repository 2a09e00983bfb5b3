//! Test accuracy over Lipschitz budgets and training lengths.
//!
//! `cargo run --release --example sensitivity_sweep`

use lel::data::{split_trials, synth_dataset, SynthSpec};
use lel::training::{sensitivity_sweep, TrainConfig, SENSITIVITY_EPOCHS, SENSITIVITY_K};

fn main() -> lel::Result<()> {
    let set = synth_dataset(&SynthSpec::default())?;
    let base = TrainConfig::default();
    let split = split_trials(&set, base.ratios, base.seed)?;
    let cells = sensitivity_sweep(&set, &split, &base, &SENSITIVITY_K, &SENSITIVITY_EPOCHS)?;
    println!("{:>6} {:>6} {:>10} {:>8}", "K", "epochs", "best epoch", "test acc");
    for c in &cells {
        println!(
            "{:>6} {:>6} {:>10} {:>8.4}",
            c.k, c.epochs, c.best_epoch, c.test.accuracy
        );
    }
    Ok(())
}
