//! Generates a synthetic band-power dataset, splits it by trial and reports
//! the training-free oracle accuracy.
//!
//! `cargo run --release --example synth_dataset -- [boost_db]`

use lel::data::{band_power_oracle_accuracy, split_trials, synth_dataset, SplitName, SplitRatios, SynthSpec};

fn main() -> lel::Result<()> {
    let boost_db = std::env::args()
        .nth(1)
        .map_or(12.0, |b| b.parse().expect("boost_db must be a number"));
    let spec = SynthSpec {
        boost_db,
        ..SynthSpec::default()
    };
    let set = synth_dataset(&spec)?;
    println!(
        "{} windows, {} channels x {} samples at {} Hz, {} classes",
        set.len(),
        set.n_channels(),
        set.n_samples(),
        set.sampling_rate(),
        set.n_classes
    );
    for k in 0..spec.n_classes {
        let (band, channels) = spec.signature(k);
        println!(
            "  class {k}: band {} on channels {channels:?}",
            lel::data::DEFAULT_BANDS[band].name
        );
    }
    let split = split_trials(&set, SplitRatios::default(), 0)?;
    for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
        println!("  {:<5} {} windows", name.as_str(), split.indices(&set, name).len());
    }
    println!("oracle accuracy {:.4}", band_power_oracle_accuracy(&set, &spec)?);
    Ok(())
}
