//! Train the tiny preset on CIFAR-10 (binary version).
//!
//!     cargo run --release --example cifar10 <dir> [epochs]

use std::path::PathBuf;

use dynamixer::data::load_cifar10;
use dynamixer::train::{train, TrainConfig, TrainOptions};
use dynamixer::ModelConfig;

fn main() -> dynamixer::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("usage: cifar10 <dir> [epochs]"));
    let epochs = args.next().map_or(10, |s| s.parse().expect("epochs"));
    let (train_set, val_set) = load_cifar10(&dir)?;
    println!(
        "train {} / val {}; channel means {:?}",
        train_set.len(),
        val_set.len(),
        train_set.channel_means()
    );

    let model = ModelConfig::preset("tiny").unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 128,
        base_lr: 0.005,
        label_smoothing: 0.1,
        augment: true,
        ..TrainConfig::default()
    };
    let report = train(&model, &cfg, &train_set, &val_set, &TrainOptions::default())?;
    for row in report.metrics.iter().filter(|r| r.val_top1.is_some()) {
        println!(
            "epoch {} loss {:.4} val top-1 {:.4}",
            row.epoch,
            row.train_loss,
            row.val_top1.unwrap()
        );
    }
    Ok(())
}
