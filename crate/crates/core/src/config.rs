//! Model hyperparameters, ablation switches, and the named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a DynaMixer operation obtains its token-mixing matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixGenKind {
    /// Generated from the reduced features of all tokens being mixed.
    #[default]
    Dynamic,
    /// Row `i` comes from token `i` alone, through a per-segment `D×N` map.
    DensePerToken,
    /// A learnable `N×N` matrix, identical for every input, used without
    /// softmax.
    StaticRandom,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_row: bool,
    pub disable_col: bool,
    pub disable_channel: bool,
    pub disable_reweight: bool,
    /// Reuse the row-mixing operation weights for column mixing.
    pub share_row_col_op: bool,
    pub gen_kind: MixGenKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Side of the square patch merged into one token at the stage entry.
    pub patch_size: usize,
    pub hidden: usize,
    pub depth: usize,
    pub segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Reduced token dimensionality `d` fed to the matrix generator.
    pub reduced_dim: usize,
    pub mlp_ratio: usize,
    /// Drop-path rate of the last layer; earlier layers ramp up linearly from 0.
    pub stoch_depth_max: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_in_channels() -> usize {
    3
}

pub const PRESET_NAMES: [&str; 4] = ["dynamixer-s", "dynamixer-m", "dynamixer-l", "tiny"];

impl ModelConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let stage = |patch_size, hidden, depth, segments| StageConfig {
            patch_size,
            hidden,
            depth,
            segments,
        };
        let base = |stages, reduced_dim, stoch_depth_max| ModelConfig {
            image_size: 224,
            in_channels: 3,
            stages,
            reduced_dim,
            mlp_ratio: 3,
            stoch_depth_max,
            num_classes: 1000,
            ablation: Ablation::default(),
        };
        Some(match name {
            "dynamixer-s" => base(vec![stage(7, 192, 4, 8), stage(2, 384, 14, 16)], 2, 0.1),
            "dynamixer-m" => base(vec![stage(7, 256, 7, 8), stage(2, 512, 17, 16)], 2, 0.1),
            "dynamixer-l" => base(vec![stage(7, 256, 8, 8), stage(2, 512, 28, 16)], 8, 0.3),
            "tiny" => ModelConfig {
                image_size: 32,
                in_channels: 3,
                stages: vec![stage(8, 8, 1, 2), stage(2, 16, 1, 2)],
                reduced_dim: 1,
                mlp_ratio: 3,
                stoch_depth_max: 0.0,
                num_classes: 10,
                ablation: Ablation::default(),
            },
            _ => return None,
        })
    }

    /// Tokens per side at each stage.
    pub fn grid(&self, stage: usize) -> usize {
        self.stages[..=stage]
            .iter()
            .fold(self.image_size, |side, s| side / s.patch_size)
    }

    pub fn tokens(&self, stage: usize) -> usize {
        self.grid(stage).pow(2)
    }

    /// Width of one unfolded patch entering stage `stage`.
    pub fn embed_in_dim(&self, stage: usize) -> usize {
        let channels = if stage == 0 {
            self.in_channels
        } else {
            self.stages[stage - 1].hidden
        };
        self.stages[stage].patch_size.pow(2) * channels
    }

    pub fn total_depth(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    /// Drop-path rate of the layer at global index `layer`.
    pub fn drop_path_rate(&self, layer: usize) -> f64 {
        let total = self.total_depth();
        if total <= 1 {
            0.0
        } else {
            self.stoch_depth_max * layer as f64 / (total - 1) as f64
        }
    }

    /// Hidden width of the reweighting bottleneck.
    pub fn reweight_hidden(&self, stage: usize) -> usize {
        (self.stages[stage].hidden / 4).max(1)
    }

    pub fn head_in_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.hidden)
    }

    /// Check every structural constraint, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let ab = &self.ablation;
        if self.stages.is_empty() {
            problems.push("at least one stage is required".to_string());
        }
        for (name, v) in [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("reduced_dim", self.reduced_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.stoch_depth_max) {
            problems.push(format!(
                "stoch_depth_max must lie in [0, 1], got {}",
                self.stoch_depth_max
            ));
        }
        let mut side = self.image_size;
        for (i, s) in self.stages.iter().enumerate() {
            for (name, v) in [
                ("patch_size", s.patch_size),
                ("hidden", s.hidden),
                ("depth", s.depth),
                ("segments", s.segments),
            ] {
                if v == 0 {
                    problems.push(format!("stages[{i}].{name} must be >= 1"));
                }
            }
            if s.patch_size == 0 || !side.is_multiple_of(s.patch_size) {
                problems.push(format!(
                    "stages[{i}]: grid side {side} not divisible by patch_size {}",
                    s.patch_size
                ));
                break;
            }
            side /= s.patch_size;
            if s.segments != 0 && s.hidden % s.segments != 0 {
                problems.push(format!(
                    "stages[{i}]: hidden {} not divisible by segments {}",
                    s.hidden, s.segments
                ));
            }
        }
        if ab.disable_row && ab.disable_col && ab.disable_channel {
            problems.push("row, column and channel mixing cannot all be disabled".into());
        }
        if ab.share_row_col_op && (ab.disable_row || ab.disable_col) {
            problems.push("share_row_col_op needs both row and column mixing enabled".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_match_their_grids() {
        for name in PRESET_NAMES {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        let s = ModelConfig::preset("dynamixer-s").unwrap();
        assert_eq!((s.grid(0), s.grid(1)), (32, 16));
        assert_eq!(s.total_depth(), 18);
        let tiny = ModelConfig::preset("tiny").unwrap();
        assert_eq!((tiny.grid(0), tiny.grid(1)), (4, 2));
        assert_eq!(tiny.embed_in_dim(0), 192);
        assert_eq!(tiny.embed_in_dim(1), 32);
    }

    #[test]
    fn validation_itemizes_every_problem() {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.stages[0].segments = 3;
        cfg.stages[1].segments = 5;
        cfg.ablation.disable_row = true;
        cfg.ablation.disable_col = true;
        cfg.ablation.disable_channel = true;
        match cfg.validate() {
            Err(Error::Config(items)) => assert_eq!(items.len(), 3, "{items:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn drop_path_ramps_linearly_over_all_layers() {
        let s = ModelConfig::preset("dynamixer-s").unwrap();
        assert_eq!(s.drop_path_rate(0), 0.0);
        assert!((s.drop_path_rate(17) - 0.1).abs() < 1e-15);
        assert!((s.drop_path_rate(9) - 0.1 * 9.0 / 17.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"image_size":32,"stages":[],"reduced_dim":1,"mlp_ratio":3,
            "stoch_depth_max":0.0,"num_classes":10,"bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
