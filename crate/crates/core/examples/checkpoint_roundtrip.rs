//! Saves a briefly trained model as a checkpoint directory, reloads it and
//! compares predictions bit for bit.

use lel::checkpoint;
use lel::data::{split_trials, synth_dataset, SplitName, SynthSpec};
use lel::training::{train, TrainConfig};

fn main() -> lel::Result<()> {
    let set = synth_dataset(&SynthSpec {
        n_channels: 4,
        n_samples: 256,
        trials_per_class: 20,
        ..SynthSpec::default()
    })?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let split = split_trials(&set, cfg.ratios, cfg.seed)?;
    let out = train(&set, &split, &cfg)?;
    let dir = std::env::temp_dir().join(format!("lel-checkpoint-{}", std::process::id()));
    checkpoint::save(&dir, &out.model, None, None)?;
    println!(
        "{}",
        std::fs::read_to_string(dir.join(checkpoint::MANIFEST_FILE)).map_err(|e| lel::LelError::io(&dir, e))?
    );
    let (loaded, _) = checkpoint::load(&dir)?;
    let x = set.batch(&split.indices(&set, SplitName::Test)).data;
    let same = out.model.predict(&x)?.fused == loaded.predict(&x)?.fused;
    println!("predictions identical after reload: {same}");
    std::fs::remove_dir_all(&dir).map_err(|e| lel::LelError::io(&dir, e))?;
    Ok(())
}
