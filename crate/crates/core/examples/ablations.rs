//! Each ablation switch on the tiny preset: parameter count, its change
//! from the full model, and one training step.

use dynamixer::analysis::count_params;
use dynamixer::data::synth_dataset;
use dynamixer::mixer::Mode;
use dynamixer::train::{adamw_step, AdamState};
use dynamixer::{Ablation, MixGenKind, Model, ModelConfig};

fn main() -> dynamixer::Result<()> {
    let base = ModelConfig::preset("tiny").unwrap();
    let full = Model::new(base.clone(), 0)?.num_params() as i64;
    let data = synth_dataset(8, 32, 3, 4, 10, 0.1, 0)?;
    let (images, labels) = data.batch(&(0..8).collect::<Vec<_>>());

    let variants: Vec<(&str, Ablation)> = vec![
        ("full", Ablation::default()),
        (
            "-row",
            Ablation {
                disable_row: true,
                ..Ablation::default()
            },
        ),
        (
            "-col",
            Ablation {
                disable_col: true,
                ..Ablation::default()
            },
        ),
        (
            "-channel",
            Ablation {
                disable_channel: true,
                ..Ablation::default()
            },
        ),
        (
            "-reweight",
            Ablation {
                disable_reweight: true,
                ..Ablation::default()
            },
        ),
        (
            "shared row/col",
            Ablation {
                share_row_col_op: true,
                ..Ablation::default()
            },
        ),
        (
            "dense per-token",
            Ablation {
                gen_kind: MixGenKind::DensePerToken,
                ..Ablation::default()
            },
        ),
        (
            "static",
            Ablation {
                gen_kind: MixGenKind::StaticRandom,
                ..Ablation::default()
            },
        ),
    ];
    for (name, ablation) in variants {
        let cfg = ModelConfig {
            ablation,
            ..base.clone()
        };
        let mut model = Model::new(cfg.clone(), 0)?;
        let (loss, grads) = model.loss_and_grads(&images, &labels, 0.0, &mut Mode::Eval)?;
        adamw_step(&mut model.weights, &grads, &mut AdamState::new(&cfg)?, 1e-3, 0.05)?;
        let n = model.num_params() as i64;
        assert_eq!(n as u64, count_params(&cfg)?.total_params);
        println!("{name:<16} params {n:>6} ({:+6})  loss {loss:.4}", n - full);
    }
    Ok(())
}
