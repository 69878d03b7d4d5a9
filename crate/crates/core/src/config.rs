//! Run configuration: named presets, JSON overrides and a stable hash.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dino::{AugmentConfig, DinoConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::eval::{OutlierMode, DEFAULT_Z_CAP};
use crate::io::sha256_hex;
use crate::mil::MilConfig;
use crate::preprocess::{MacenkoParams, SynthConfig};
use crate::vit::VitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub n_slides: usize,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub positive_fraction: f64,
    /// Held out per class for evaluation.
    pub test_fraction: f64,
    /// Planted tumour cells per positive slide, inclusive range.
    pub planted_min: usize,
    pub planted_max: usize,
    pub slide: SynthConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSettings {
    pub patch_size: u32,
    pub min_foreground: f64,
    pub normalize: bool,
    pub macenko: MacenkoParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSettings {
    /// Number of final blocks whose class token enters the feature vector.
    pub k_last: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub z_cap: f64,
    pub outlier_mode: OutlierMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSettings,
    pub tile: TileSettings,
    pub vit: VitConfig,
    pub dino: DinoConfig,
    pub embed: EmbedSettings,
    pub mil: MilConfig,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Full-size settings: 224-pixel patches, ViT-B/16, 100 epochs.
    Paper,
    /// Small model and budget for synthetic slides on a laptop.
    #[default]
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Usage(format!("unknown preset {s:?} (expected paper or desk)"))),
        }
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            synth: SynthSettings {
                n_slides: 200,
                grid_rows: 8,
                grid_cols: 8,
                positive_fraction: 0.5,
                test_fraction: 0.3,
                planted_min: 2,
                planted_max: 8,
                slide: SynthConfig {
                    cell_size: 224,
                    ..SynthConfig::default()
                },
            },
            tile: TileSettings {
                patch_size: 224,
                min_foreground: 0.25,
                normalize: true,
                macenko: MacenkoParams::default(),
            },
            vit: VitConfig::vit_b16(),
            dino: DinoConfig::default(),
            embed: EmbedSettings { k_last: 4 },
            mil: MilConfig::default(),
            eval: EvalSettings {
                z_cap: DEFAULT_Z_CAP,
                outlier_mode: OutlierMode::Clamp,
            },
        }
    }

    pub fn desk() -> Self {
        let paper = Self::paper();
        Self {
            synth: SynthSettings {
                slide: SynthConfig::default(),
                ..paper.synth
            },
            tile: TileSettings {
                patch_size: 32,
                ..paper.tile
            },
            vit: VitConfig::desk(),
            dino: DinoConfig {
                epochs: 10,
                warmup_epochs: 2,
                ema_start: 0.99,
                max_tiles: Some(2000),
                head: HeadConfig::default(),
                augment: AugmentConfig::default(),
                ..paper.dino
            },
            embed: EmbedSettings { k_last: 4 },
            mil: MilConfig {
                lr: 5e-4,
                ..paper.mil
            },
            eval: paper.eval,
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Preset values, deep-merged with the JSON file at `overrides` if given.
    pub fn load(preset: Preset, overrides: Option<&Path>) -> Result<Self> {
        let base = Self::preset(preset);
        let Some(path) = overrides else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path)?;
        let overlay: Value = serde_json::from_str(&text)?;
        base.merged(overlay)
    }

    /// Applies a partial JSON object on top of `self`; unknown keys are rejected.
    pub fn merged(&self, overlay: Value) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        merge_json(&mut value, overlay);
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if !(0.0..=1.0).contains(&s.positive_fraction) || !(0.0..1.0).contains(&s.test_fraction) {
            return Err(Error::Parameter("synth fractions must lie in [0, 1)".into()));
        }
        if s.planted_min == 0 || s.planted_min > s.planted_max {
            return Err(Error::Parameter("need 1 <= planted_min <= planted_max".into()));
        }
        if s.grid_rows == 0 || s.grid_cols == 0 || s.slide.cell_size == 0 {
            return Err(Error::Parameter("slide grid and cell size must be positive".into()));
        }
        if self.tile.patch_size == 0 || !(0.0..=1.0).contains(&self.tile.min_foreground) {
            return Err(Error::Parameter("patch size must be positive and min_foreground in [0, 1]".into()));
        }
        self.vit.validate()?;
        self.dino.validate()?;
        if self.embed.k_last == 0 || self.embed.k_last > self.vit.num_blocks {
            return Err(Error::Parameter(format!(
                "k_last must be in 1..={}, got {}",
                self.vit.num_blocks, self.embed.k_last
            )));
        }
        let m = &self.mil;
        if m.query_dim == 0 || !(m.lr > 0.0) || !(0.0..1.0).contains(&m.beta1) || !(0.0..1.0).contains(&m.beta2) {
            return Err(Error::Parameter("invalid aggregator optimiser settings".into()));
        }
        if !(self.eval.z_cap > 0.0) {
            return Err(Error::Parameter("z_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

/// Recursive object merge; non-object values in `overlay` replace `base`.
pub fn merge_json(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
