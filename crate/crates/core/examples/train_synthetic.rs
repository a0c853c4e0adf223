//! Train the tiny preset on the synthetic patch-position corpus.
//!
//!     cargo run --release --example train_synthetic [steps] [out_dir]

use std::time::Instant;

use dynamixer::data::{synth_splits, SynthSpec};
use dynamixer::train::{evaluate, train, TrainConfig, TrainOptions};
use dynamixer::ModelConfig;

fn main() -> dynamixer::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(500, |s| s.parse().expect("steps"));
    let out = args.next().map(Into::into);

    let model = ModelConfig::preset("tiny").unwrap();
    let spec = SynthSpec::default();
    let (train_set, val_set) = synth_splits(&spec, model.image_size, model.in_channels, model.num_classes, 0)?;
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 32,
        base_lr: 0.01,
        weight_decay: 0.05,
        warmup_epochs: 1,
        max_steps: Some(steps),
        checkpoint_dir: out,
        ..TrainConfig::default()
    };

    let t = Instant::now();
    let opts = TrainOptions {
        deterministic: true,
        data: None,
    };
    let report = train(&model, &cfg, &train_set, &val_set, &opts)?;
    for row in report.metrics.iter().filter(|r| r.val_top1.is_some()) {
        println!(
            "epoch {:>3} step {:>4} lr {:.2e} loss {:.4} val {:.3}",
            row.epoch,
            row.step,
            row.lr,
            row.train_loss,
            row.val_top1.unwrap()
        );
    }
    let train_top1 = evaluate(&report.model, &train_set)?;
    println!(
        "{} steps in {:.1?}: train top-1 {:.3}, val top-1 {:.3}",
        report.steps,
        t.elapsed(),
        train_top1,
        report.final_val_top1
    );
    Ok(())
}
