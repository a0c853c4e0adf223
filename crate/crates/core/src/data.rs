//! Datasets: the CIFAR-10 binary batches and a separable synthetic corpus.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Images `[N, C, H, W]`, already normalized, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Format(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[Real] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Gather the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("gathered batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_means(&self) -> Vec<f64> {
        let [c, h, w] = self.image_shape();
        let mut sums = vec![0.0f64; c];
        for i in 0..self.len() {
            for (ch, plane) in self.image(i).chunks(h * w).enumerate() {
                sums[ch] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (self.len() * h * w) as f64;
        sums.into_iter().map(|s| s / count).collect()
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Per-channel statistics of the CIFAR-10 training split, on `[0, 1]` pixels.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Labels and `[0, 1]`-scaled pixels of one binary batch file.
pub fn read_cifar_file(path: &Path, expected_records: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let e = io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!(
                "truncated: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        );
        return Err(Error::io(path, e));
    }
    let records = bytes.len() / CIFAR_RECORD;
    if records != expected_records {
        return Err(Error::Format(format!(
            "{}: {records} records, expected {expected_records}",
            path.display()
        )));
    }
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!(
                "{}: record {i} has label byte {}",
                path.display(),
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((labels, pixels))
}

fn normalize_cifar(pixels: Vec<f64>) -> Vec<Real> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    pixels
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let c = (i / plane) % CIFAR_CHANNELS;
            ((p - CIFAR_MEAN[c]) / CIFAR_STD[c]) as Real
        })
        .collect()
}

fn cifar_split(dir: &Path, files: &[&str], records_per_file: usize, split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let (l, p) = read_cifar_file(&dir.join(f), records_per_file)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    let images = Tensor::new(&[n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], normalize_cifar(pixels))?;
    Dataset::new(images, labels, 10, split)
}

/// Load `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, CIFAR_RECORDS_PER_FILE)
}

/// As [`load_cifar10`] with a non-standard number of records per file.
pub fn load_cifar10_with(dir: &Path, records_per_file: usize) -> Result<(Dataset, Dataset)> {
    let train = cifar_split(dir, &CIFAR_TRAIN_FILES, records_per_file, Split::Train)?;
    let val = cifar_split(dir, &[CIFAR_TEST_FILE], records_per_file, Split::Val)?;
    Ok((train, val))
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub train_size: usize,
    pub val_size: usize,
    /// Side of the patch grid; class `k` lights patch `k` in raster order.
    pub grid: usize,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_size: 1000,
            val_size: 500,
            grid: 4,
            noise_std: 0.1,
        }
    }
}

/// Class `k` (label `i mod classes` for sample `i`) is a block of ones at
/// patch position `k` of a `grid × grid` partition, over Gaussian noise.
pub fn synth_dataset(
    n: usize,
    image_size: usize,
    channels: usize,
    grid: usize,
    classes: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if grid == 0 || classes == 0 || classes > grid * grid {
        return Err(Error::config(format!(
            "synthetic corpus needs 1 <= classes <= grid² (classes {classes}, grid {grid})"
        )));
    }
    if !image_size.is_multiple_of(grid) {
        return Err(Error::config(format!(
            "image size {image_size} not divisible by synthetic grid {grid}"
        )));
    }
    let patch = image_size / grid;
    let plane = image_size * image_size;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let (py, px) = (k / grid, k % grid);
        for _ in 0..channels {
            for y in 0..image_size {
                for x in 0..image_size {
                    let lit = y / patch == py && x / patch == px;
                    let base = if lit { 1.0 } else { 0.0 };
                    data.push((base + noise.sample(&mut rng)) as Real);
                }
            }
        }
        labels.push(k);
    }
    let images = Tensor::new(&[n, channels, image_size, image_size], data)?;
    Dataset::new(images, labels, classes, Split::Train)
}

/// Train and val corpora drawn with independent noise streams.
pub fn synth_splits(
    spec: &SynthSpec,
    image_size: usize,
    channels: usize,
    classes: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = synth_dataset(
        spec.train_size,
        image_size,
        channels,
        spec.grid,
        classes,
        spec.noise_std,
        seed,
    )?;
    let mut val = synth_dataset(
        spec.val_size,
        image_size,
        channels,
        spec.grid,
        classes,
        spec.noise_std,
        seed ^ 0x0005_eed0_f7a1,
    )?;
    val.split = Split::Val;
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Cifar10,
    #[default]
    Synthetic,
}

/// Where training and validation data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory holding the CIFAR-10 binary batches.
    pub dir: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Seed of the synthetic corpus.
    pub seed: u64,
    pub records_per_file: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            dir: None,
            synth: SynthSpec::default(),
            seed: 0,
            records_per_file: CIFAR_RECORDS_PER_FILE,
        }
    }
}

impl DataConfig {
    /// Load the `(train, val)` pair for a model with the given input shape.
    pub fn load(&self, model: &ModelConfig) -> Result<(Dataset, Dataset)> {
        match self.kind {
            DataKind::Synthetic => synth_splits(
                &self.synth,
                model.image_size,
                model.in_channels,
                model.num_classes,
                self.seed,
            ),
            DataKind::Cifar10 => {
                if model.image_size != CIFAR_SIDE || model.in_channels != CIFAR_CHANNELS || model.num_classes != 10 {
                    return Err(Error::config(format!(
                        "CIFAR-10 needs 32x32x3 inputs and 10 classes, model has {0}x{0}x{1} and {2}",
                        model.image_size, model.in_channels, model.num_classes
                    )));
                }
                let dir = self
                    .dir
                    .as_deref()
                    .ok_or_else(|| Error::config("data.dir is required for cifar10"))?;
                load_cifar10_with(dir, self.records_per_file)
            }
        }
    }
}

pub const PAD_CROP: usize = 4;

/// Random horizontal flip and `PAD_CROP`-pixel zero-pad random crop,
/// in place on a `[B, C, H, W]` batch.
pub fn augment_batch(images: &mut Tensor, rng: &mut impl Rng) {
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let pad = PAD_CROP as isize;
    for img in images.data_mut().chunks_mut(c * h * w) {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(-pad..=pad);
        let dx = rng.gen_range(-pad..=pad);
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let inside = sy >= 0 && sy < h as isize && sx0 >= 0 && sx0 < w as isize;
                    img[(ch * h + y) * w + x] = if inside {
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_pixel_argmax_separable_without_noise() {
        let ds = synth_dataset(40, 32, 3, 4, 10, 0.0, 1).unwrap();
        for i in 0..ds.len() {
            let img = ds.image(i);
            let argmax = (0..32 * 32)
                .max_by(|&a, &b| img[a].partial_cmp(&img[b]).unwrap())
                .unwrap();
            let (y, x) = (argmax / 32, argmax % 32);
            assert_eq!((y / 8) * 4 + x / 8, ds.labels[i]);
        }
    }

    #[test]
    fn synthetic_labels_are_balanced() {
        let ds = synth_dataset(103, 32, 3, 4, 10, 0.1, 2).unwrap();
        let mut hist = [0usize; 10];
        for &l in &ds.labels {
            hist[l] += 1;
        }
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn too_many_classes_rejected() {
        assert!(synth_dataset(4, 8, 1, 2, 5, 0.1, 0).is_err());
    }

    #[test]
    fn augmentation_only_moves_or_pads_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tensor::uniform(&[4, 3, 8, 8], 1.0, 2.0, &mut rng);
        let before = t.clone();
        augment_batch(&mut t, &mut rng);
        for (a, b) in t.data().chunks(64).zip(before.data().chunks(64)) {
            assert!(a.iter().all(|v| *v == 0.0 || b.contains(v)));
        }
    }
}
