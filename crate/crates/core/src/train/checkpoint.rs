//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DYNACKPT`, the manifest length as a
//! little-endian `u64`, the JSON manifest, then the payload: every tensor's
//! elements as little-endian floats of the manifest's `dtype`, concatenated
//! in manifest order. Weights come first in parameter-name order, followed
//! by optimizer moments named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainConfig;
use crate::config::ModelConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::mixer::{model_layout, Model, ModelWeights};
use crate::tensor::{Real, Tensor, IS_F64};

pub const MAGIC: &[u8; 8] = b"DYNACKPT";
pub const FORMAT_VERSION: u32 = 1;

fn dtype() -> &'static str {
    if IS_F64 {
        "f64"
    } else {
        "f32"
    }
}

/// Progress counters saved alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub data: Option<DataConfig>,
    pub state: TrainState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub data: Option<DataConfig>,
    pub state: TrainState,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Checkpoint {
            model,
            train: None,
            data: None,
            state: TrainState::default(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let names = self.model.weights.names();
        let mut tensors: Vec<(String, &Tensor)> = names.into_iter().zip(self.model.weights.leaves()).collect();
        if let Some(opt) = &self.optimizer {
            let names = self.model.weights.names();
            for (n, m) in names.iter().zip(&opt.m) {
                tensors.push((format!("adam.m.{n}"), m));
            }
            for (n, v) in names.iter().zip(&opt.v) {
                tensors.push((format!("adam.v.{n}"), v));
            }
        }
        let width = std::mem::size_of::<Real>() as u64;
        let mut offset = 0u64;
        let entries: Vec<TensorEntry> = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() as u64 * width;
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: dtype().into(),
            model: self.model.config.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
            state: self.state,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode and validate against the embedded model config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, None)
    }

    /// Decode and validate every tensor shape against `config`.
    pub fn from_bytes_for(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        Self::decode(bytes, Some(config))
    }

    fn decode(bytes: &[u8], expect: Option<&ModelConfig>) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing DYNACKPT header".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| bad("manifest runs past end of file".into()))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.dtype != dtype() {
            return Err(bad(format!(
                "payload dtype {} does not match this build ({})",
                manifest.dtype,
                dtype()
            )));
        }
        let config = expect.unwrap_or(&manifest.model).clone();
        let layout = model_layout(&config)?;
        let payload = &bytes[16 + len..];
        let width = std::mem::size_of::<Real>();

        let read = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| bad(format!("parameter `{name}` missing")))?;
            if entry.shape != shape {
                return Err(bad(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    entry.shape, shape
                )));
            }
            let n: usize = shape.iter().product();
            let start = entry.offset as usize;
            let raw = payload
                .get(start..start + n * width)
                .ok_or_else(|| bad(format!("parameter `{name}` runs past end of payload")))?;
            let data = raw
                .chunks_exact(width)
                .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape, data)
        };

        let mut first_err = None;
        let mut capture = |r: Result<Tensor>| match r {
            Ok(t) => t,
            Err(e) => {
                first_err.get_or_insert(e);
                Tensor::scalar(0.0)
            }
        };
        let weights: ModelWeights<Tensor> = layout.map(|name, spec| capture(read(name, &spec.shape)));
        let has_adam = manifest.tensors.iter().any(|e| e.name.starts_with("adam."));
        let mut optimizer = None;
        if has_adam {
            let mut m = Vec::new();
            let mut v = Vec::new();
            let mut decay = Vec::new();
            layout.for_each(|name, spec| {
                m.push(capture(read(&format!("adam.m.{name}"), &spec.shape)));
                v.push(capture(read(&format!("adam.v.{name}"), &spec.shape)));
                decay.push(spec.decays());
            });
            optimizer = Some(AdamState {
                step: manifest.state.step as u64,
                m,
                v,
                decay,
            });
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let known = weights.names();
        if let Some(extra) = manifest.tensors.iter().find(|e| {
            let base = e
                .name
                .strip_prefix("adam.m.")
                .or(e.name.strip_prefix("adam.v."))
                .unwrap_or(&e.name);
            !known.iter().any(|k| k == base)
        }) {
            return Err(bad(format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(Checkpoint {
            model: Model { config, weights },
            train: manifest.train,
            data: manifest.data,
            state: manifest.state,
            optimizer,
        })
    }

    /// Write atomically: a sibling temporary file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes_for(&bytes, config)
    }
}
