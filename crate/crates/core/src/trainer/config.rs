use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::damsm::ImageEncoderConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{DtcError, Result};
use crate::evaluator::OracleTrainConfig;
use crate::generator::GeneratorConfig;
use crate::losses::{DamsmConfig, LossWeights};
use crate::nn::AdamConfig;
use crate::text::TextConfig;

/// Every training and model hyperparameter, read from a flat `key = value`
/// file. Unlisted keys keep the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub resolution: usize,
    pub batch_size: usize,
    pub damsm_epochs: usize,
    pub gan_epochs: usize,
    /// Caps the optimisation steps of each phase when non-zero.
    pub max_steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_damsm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub c_damsm: f64,
    pub c_mmrfm: f64,
    pub c_perc: f64,
    pub c_pixel: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub m_max: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Keep an exponential moving average of generator weights for inference.
    pub g_ema: bool,
    pub g_ema_decay: f64,
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub d_e: usize,
    pub d_z: usize,
    pub d_img: usize,
    pub g_base_channels: usize,
    pub g_min_channels: usize,
    pub mask_size: usize,
    pub d_base_channels: usize,
    pub d_backbone_channels: usize,
    pub region_dim: usize,
    pub roi_bins: usize,
    pub crop_size: usize,
    pub damsm_channels: usize,
    /// Also pretrain on whole images paired with their full scene description.
    pub damsm_scene_pairs: bool,
    pub oracle_epochs: usize,
    pub oracle_lr: f64,
    pub oracle_threshold: f64,
    pub oracle_max_crops: usize,
    pub n_candidates: usize,
    pub retrieval_candidates: usize,
    /// Limits evaluated images per split when non-zero.
    pub eval_max_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            resolution: 64,
            batch_size: 16,
            damsm_epochs: 30,
            gan_epochs: 60,
            max_steps: 0,
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_damsm: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            lambda1: 0.1,
            lambda2: 1.0,
            c_damsm: 1.0,
            c_mmrfm: 1.0,
            c_perc: 1.0,
            c_pixel: 1.0,
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 10.0,
            m_max: 6,
            checkpoint_every: 1000,
            g_ema: false,
            g_ema_decay: 0.999,
            embed_dim: 64,
            text_hidden: 64,
            d_e: 128,
            d_z: 128,
            d_img: 128,
            g_base_channels: 256,
            g_min_channels: 32,
            mask_size: 16,
            d_base_channels: 32,
            d_backbone_channels: 256,
            region_dim: 256,
            roi_bins: 4,
            crop_size: 32,
            damsm_channels: 32,
            damsm_scene_pairs: true,
            oracle_epochs: 6,
            oracle_lr: 1e-3,
            oracle_threshold: 0.98,
            oracle_max_crops: 0,
            n_candidates: 10,
            retrieval_candidates: 20,
            eval_max_images: 0,
        }
    }
}

impl TrainConfig {
    /// 128×128, batch 128, 200 epochs, ten regions.
    pub fn paper() -> Self {
        TrainConfig {
            resolution: 128,
            batch_size: 128,
            gan_epochs: 200,
            m_max: 10,
            ..TrainConfig::default()
        }
    }

    /// Miniature networks for tests and quick checks.
    pub fn smoke() -> Self {
        TrainConfig {
            resolution: 32,
            batch_size: 4,
            damsm_epochs: 1,
            gan_epochs: 1,
            embed_dim: 16,
            text_hidden: 16,
            d_e: 32,
            d_z: 16,
            d_img: 32,
            g_base_channels: 32,
            g_min_channels: 8,
            mask_size: 8,
            d_base_channels: 8,
            d_backbone_channels: 32,
            region_dim: 32,
            roi_bins: 2,
            crop_size: 16,
            damsm_channels: 8,
            oracle_epochs: 1,
            oracle_max_crops: 64,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(DtcError::Config(format!("unknown preset '{name}'"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| DtcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DtcError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if ![32, 64, 128].contains(&self.resolution) {
            return bad(format!("resolution {} must be 32, 64 or 128", self.resolution));
        }
        if self.m_max == 0 {
            return bad("m_max must be positive".into());
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_damsm", self.lr_damsm), ("oracle_lr", self.oracle_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.g_ema_decay) {
            return bad("g_ema_decay must lie in [0, 1)".into());
        }
        if self.n_candidates < 2 || self.retrieval_candidates < 2 {
            return bad("candidate pools need at least two entries".into());
        }
        self.loss_weights().validate()?;
        self.damsm().validate()?;
        self.generator().validate()?;
        self.discriminator().num_down()?;
        self.image_encoder().validate()
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            embed_dim: self.embed_dim,
            hidden: self.text_hidden,
            sentence_dim: self.d_e,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.resolution,
            d_img: self.d_img,
            d_z: self.d_z,
            d_e: self.d_e,
            base_channels: self.g_base_channels,
            min_channels: self.g_min_channels,
            mask_size: self.mask_size,
            max_regions: self.m_max,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: self.resolution,
            base_channels: self.d_base_channels,
            backbone_channels: self.d_backbone_channels,
            region_dim: self.region_dim,
            bins: self.roi_bins,
            d_e: self.d_e,
        }
    }

    pub fn image_encoder(&self) -> ImageEncoderConfig {
        ImageEncoderConfig {
            crop_size: self.crop_size,
            channels: self.damsm_channels,
            word_dim: 2 * self.text_hidden,
            d_e: self.d_e,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            damsm: self.c_damsm,
            mmrfm: self.c_mmrfm,
            perceptual: self.c_perc,
            pixel: self.c_pixel,
        }
    }

    pub fn damsm(&self) -> DamsmConfig {
        DamsmConfig {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            gamma3: self.gamma3,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn oracle(&self) -> OracleTrainConfig {
        OracleTrainConfig {
            epochs: self.oracle_epochs,
            batch_size: 32,
            lr: self.oracle_lr,
            seed: self.seed,
            threshold: self.oracle_threshold,
            max_crops: self.oracle_max_crops,
        }
    }
}
