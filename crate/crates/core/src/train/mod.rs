//! Desk-scale training: AdamW, warmup-cosine schedule, drop-path, periodic
//! checkpoints and a CSV metrics log.

mod checkpoint;
mod optim;
mod schedule;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, TrainState, FORMAT_VERSION, MAGIC};
pub use optim::{adamw_step, adamw_update, AdamState, ADAM_EPS, BETA1, BETA2};
pub use schedule::lr_schedule;

use crate::config::ModelConfig;
use crate::data::{augment_batch, shuffled, DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::mixer::{Mode, Model};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Where `metrics.csv`, `last.ckpt` and `final.ckpt` are written.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save `last.ckpt` every this many epochs.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Random horizontal flip and pad-crop on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            base_lr: 0.002,
            weight_decay: 0.05,
            warmup_start_lr: 1e-6,
            warmup_epochs: 1,
            label_smoothing: 0.0,
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 1,
            max_steps: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".to_string());
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be >= 1".to_string());
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("warmup_start_lr", self.warmup_start_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("train.{name} must be a finite rate >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push("train.label_smoothing must be in [0, 1)".to_string());
        }
        if self.checkpoint_every == 0 {
            errs.push("train.checkpoint_every must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(train_len);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// One line of `metrics.csv`. `val_top1` is only set on the last step of an
/// epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
}

/// Run options that are not hyperparameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Assemble batches on the training thread instead of a prefetch thread.
    pub deterministic: bool,
    /// Recorded in checkpoints so evaluation can rebuild the same data.
    pub data: Option<DataConfig>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    pub steps: usize,
    pub final_val_top1: f64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Fraction of `data` whose argmax logit matches the label.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let logits = model.predict_parallel(&data.images)?;
    Ok(top1(&logits, &data.labels) as f64 / data.len() as f64)
}

/// Number of rows of `logits` whose first maximal entry is at the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Load a checkpoint, validate it against `config` and evaluate it.
pub fn evaluate_checkpoint(path: &Path, config: &ModelConfig, data: &Dataset) -> Result<f64> {
    let ck = Checkpoint::load_for(path, config)?;
    evaluate(&ck.model, data)
}

struct Batch {
    epoch: usize,
    last_in_epoch: bool,
    images: Tensor,
    labels: Vec<usize>,
}

fn batches(data: &Dataset, cfg: &TrainConfig, total: usize, mut emit: impl FnMut(Batch) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut produced = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(data.len(), &mut rng);
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (i, idx) in chunks.iter().enumerate() {
            let (mut images, labels) = data.batch(idx);
            if cfg.augment {
                augment_batch(&mut images, &mut rng);
            }
            produced += 1;
            let last_in_epoch = i + 1 == chunks.len() || produced == total;
            if !emit(Batch {
                epoch,
                last_in_epoch,
                images,
                labels,
            }) || produced == total
            {
                return;
            }
        }
    }
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Train a freshly initialized model (seeded by `train_cfg.seed`).
///
/// With `deterministic` unset, batches are assembled on a prefetch thread
/// feeding a bounded queue; the batch sequence is the same either way.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    train_model(model, train_cfg, train_set, val_set, opts)
}

/// Train an existing model in place of a fresh one.
pub fn train_model(
    model: Model,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    model.config.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let total = cfg.total_steps(train_set.len());
    let warmup = cfg.warmup_epochs * cfg.steps_per_epoch(train_set.len());

    let mut ck = Checkpoint {
        optimizer: Some(AdamState::new(&model.config)?),
        model,
        train: Some(cfg.clone()),
        data: opts.data.clone(),
        state: TrainState::default(),
    };
    let last_path = cfg.checkpoint_dir.as_ref().map(|d| d.join(LAST_CHECKPOINT));
    if let Some(p) = &last_path {
        ck.save(p)?;
    }

    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut metrics = Vec::with_capacity(total);
    let mut final_val = 0.0;

    let mut on_batch = |b: Batch| -> Result<()> {
        let step = ck.state.step;
        let lr = lr_schedule(step, total, warmup, cfg.base_lr, cfg.warmup_start_lr);
        let mut mode = Mode::Train { rng: &mut drop_rng };
        let (loss, grads) = ck
            .model
            .loss_and_grads(&b.images, &b.labels, cfg.label_smoothing as Real, &mut mode)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let opt = ck.optimizer.as_mut().expect("optimizer state");
        adamw_step(&mut ck.model.weights, &grads, opt, lr, cfg.weight_decay)?;
        ck.state.step += 1;
        let mut row = MetricRow {
            epoch: b.epoch,
            step,
            lr,
            train_loss: loss as f64,
            val_top1: None,
        };
        if b.last_in_epoch {
            ck.state.epoch = b.epoch + 1;
            if !val_set.is_empty() {
                final_val = evaluate(&ck.model, val_set)?;
                row.val_top1 = Some(final_val);
            }
            if let Some(p) = &last_path {
                if ck.state.epoch.is_multiple_of(cfg.checkpoint_every) || ck.state.step == total {
                    ck.save(p)?;
                }
            }
        }
        metrics.push(row);
        Ok(())
    };

    let mut outcome = Ok(());
    if opts.deterministic {
        batches(train_set, cfg, total, |b| {
            outcome = on_batch(b);
            outcome.is_ok()
        });
    } else {
        let (tx, rx) = mpsc::sync_channel::<Batch>(2);
        thread::scope(|s| {
            s.spawn(move || batches(train_set, cfg, total, |b| tx.send(b).is_ok()));
            for b in rx.iter() {
                outcome = on_batch(b);
                if outcome.is_err() {
                    break;
                }
            }
            // dropping the receiver stops the producer
            drop(rx);
        });
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        write_metrics(&dir.join(METRICS_FILE), &metrics)?;
    }
    outcome?;

    let final_checkpoint = match &cfg.checkpoint_dir {
        Some(dir) => {
            let p = dir.join(FINAL_CHECKPOINT);
            ck.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainReport {
        model: ck.model,
        steps: metrics.len(),
        metrics,
        final_val_top1: final_val,
        final_checkpoint,
    })
}
