//! Save a briefly trained model, reload it, and confirm the bytes and the
//! evaluation are unchanged.

use dynamixer::data::synth_splits;
use dynamixer::data::SynthSpec;
use dynamixer::train::{evaluate, train, Checkpoint, TrainConfig, TrainOptions};
use dynamixer::ModelConfig;

fn main() -> dynamixer::Result<()> {
    let dir = std::env::temp_dir().join("dynamixer-roundtrip");
    let model = ModelConfig::preset("tiny").unwrap();
    let spec = SynthSpec {
        train_size: 128,
        val_size: 64,
        ..SynthSpec::default()
    };
    let (train_set, val_set) = synth_splits(&spec, 32, 3, 10, 0)?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        base_lr: 0.01,
        checkpoint_dir: Some(dir.clone()),
        ..TrainConfig::default()
    };
    let report = train(&model, &cfg, &train_set, &val_set, &TrainOptions::default())?;
    let path = report.final_checkpoint.expect("checkpoint dir was set");

    let bytes = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path)?;
    let resaved = loaded.to_bytes();
    println!(
        "{}: {} bytes, re-encoded identically: {}",
        path.display(),
        bytes.len(),
        bytes == resaved
    );

    let before = evaluate(&report.model, &val_set)?;
    let after = evaluate(&loaded.model, &val_set)?;
    println!(
        "val top-1 before {before}, after {after}, bit-identical: {}",
        before.to_bits() == after.to_bits()
    );
    Ok(())
}
