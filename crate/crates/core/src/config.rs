//! Run configuration: flat keys in a TOML file, overridable from the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorKind, WsiConfig};
use crate::attention::MaskMode;
use crate::augment::AugmentConfig;
use crate::detector::{DetectTrainConfig, DetectorConfig};
use crate::encoder::EncoderConfig;
use crate::error::{param_err, Error, Result};
use crate::model::TileModelConfig;
use crate::ssa::SsaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub epochs: usize,
    pub detect_epochs: usize,
    pub wsi_epochs: usize,
    pub batch_detect: usize,
    pub batch_tile: usize,
    pub batch_wsi: usize,
    pub alpha: f64,
    pub margin: f64,
    pub k: usize,
    pub seed: u64,
    pub pt: bool,
    pub ssa: bool,
    pub cl: bool,
    /// Encoder preset: toy, desk or paper.
    pub encoder: String,
    /// SSA head preset: toy or desk.
    pub head: String,
    pub tile_size: usize,
    pub aggregator: AggregatorKind,
    pub mask_mode: MaskMode,
    /// Encoder stages (after the stem) kept frozen when pre-trained.
    pub freeze_stages: usize,
    pub n_folds: usize,
    pub tau: f64,
    pub aug_brightness: f32,
    pub aug_contrast: f32,
    pub aug_hue: f32,
    pub aug_noise: f32,
    /// Random flips and quarter turns of each training sample.
    pub aug_dihedral: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            lr: 3e-4,
            epochs: 100,
            detect_epochs: 100,
            wsi_epochs: 100,
            batch_detect: 8,
            batch_tile: 8,
            batch_wsi: 16,
            alpha: 0.1,
            margin: 1.0,
            k: 10,
            seed: 0,
            pt: true,
            ssa: true,
            cl: true,
            encoder: "toy".into(),
            head: "toy".into(),
            tile_size: 128,
            aggregator: AggregatorKind::Transformer,
            mask_mode: MaskMode::Soft,
            freeze_stages: 1,
            n_folds: 5,
            tau: 0.5,
            aug_brightness: aug.brightness,
            aug_contrast: aug.contrast,
            aug_hue: aug.hue,
            aug_noise: aug.noise_std,
            aug_dihedral: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(param_err!("lr must be positive"));
        }
        if self.batch_detect == 0 || self.batch_tile == 0 || self.batch_wsi == 0 {
            return Err(param_err!("batch sizes must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) || !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(param_err!("alpha and margin must be non-negative"));
        }
        if self.k == 0 {
            return Err(param_err!("k must be at least 1"));
        }
        if self.tile_size == 0 || self.tile_size % 32 != 0 {
            return Err(param_err!("tile_size {} must be a positive multiple of 32", self.tile_size));
        }
        if self.freeze_stages > 4 {
            return Err(param_err!("freeze_stages must be at most 4"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(param_err!("tau must lie in [0, 1]"));
        }
        EncoderConfig::preset(&self.encoder)?;
        self.ssa_config()?;
        self.augment().validate()
    }

    pub fn ssa_config(&self) -> Result<SsaConfig> {
        match self.head.as_str() {
            "toy" => Ok(SsaConfig::toy()),
            "desk" => Ok(SsaConfig::desk()),
            other => Err(param_err!("unknown head preset '{other}'")),
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            brightness: self.aug_brightness,
            contrast: self.aug_contrast,
            hue: self.aug_hue,
            noise_std: self.aug_noise,
        }
    }

    /// Contrastive weight actually used: zero when CL is switched off.
    pub fn effective_alpha(&self) -> f64 {
        if self.cl {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn tile_model(&self) -> Result<TileModelConfig> {
        Ok(TileModelConfig {
            encoder: EncoderConfig::preset(&self.encoder)?,
            ssa: if self.ssa { Some(self.ssa_config()?) } else { None },
            tile_size: self.tile_size,
        })
    }

    pub fn detector(&self) -> Result<DetectorConfig> {
        Ok(DetectorConfig::for_encoder(EncoderConfig::preset(&self.encoder)?))
    }

    pub fn detect_train(&self) -> DetectTrainConfig {
        DetectTrainConfig {
            epochs: self.detect_epochs,
            lr: self.lr,
            batch_size: self.batch_detect,
            seed: self.seed,
        }
    }

    pub fn wsi(&self, in_dim: usize) -> WsiConfig {
        match self.aggregator {
            AggregatorKind::Transformer => WsiConfig::transformer(in_dim, self.k),
            AggregatorKind::Mlp => WsiConfig::mlp(in_dim, self.k),
        }
    }

    /// `PT/SSA/CL` as a three-character flag string such as `101`.
    pub fn flag_string(&self) -> String {
        [self.pt, self.ssa, self.cl].iter().map(|&f| if f { '1' } else { '0' }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.epochs, 100);
        assert_eq!((c.batch_detect, c.batch_tile, c.batch_wsi), (8, 8, 16));
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.k, 10);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = RunConfig {
            cl: false,
            seed: 9,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap(), c);
        let partial = RunConfig::from_toml_str("epochs = 3\npt = false\nmask_mode = \"literal\"\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert!(!partial.pt);
        assert_eq!(partial.mask_mode, MaskMode::Literal);
        assert_eq!(partial.lr, 3e-4);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in ["lr = -1.0", "k = 0", "tile_size = 100", "encoder = \"vgg\"", "unknown_key = 1", "batch_tile = 0"] {
            assert!(RunConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn alpha_zero_without_cl() {
        let c = RunConfig {
            cl: false,
            ..RunConfig::default()
        };
        assert_eq!(c.effective_alpha(), 0.0);
        assert_eq!(c.flag_string(), "110");
    }
}
