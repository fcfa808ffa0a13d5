//! Hierarchical run configuration with schema validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::GenProfile;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::losses::MatchWeights;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RcRunConfig {
    pub enabled: bool,
    /// Ablation: keep the forward pass but cut recognition gradients to the
    /// proposal features.
    pub stop_gradient: bool,
}

impl Default for RcRunConfig {
    fn default() -> Self {
        Self { enabled: true, stop_gradient: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerRunConfig {
    pub t_max: usize,
    pub alphabet: String,
}

impl Default for RecognizerRunConfig {
    fn default() -> Self {
        Self {
            t_max: crate::recognizer::DEFAULT_T_MAX,
            alphabet: "abcdefghijklmnopqrstuvwxyz0123456789".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Cosine-decay the learning rate to zero over `iters`.
    pub cosine_decay: bool,
    pub iters: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-5,
            weight_decay: 1e-4,
            cosine_decay: false,
            iters: 10_000,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    /// Random scale / rotate / crop augmentation.
    pub augment: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Number of synthetic images when training on generated data.
    pub num_images: usize,
    /// Masks sampled to fit the mask-coding basis.
    pub basis_samples: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            augment: true,
            checkpoint_every: 1000,
            log_every: 50,
            num_images: 1000,
            basis_samples: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub detector: DetectorConfig,
    pub rc: RcRunConfig,
    pub recognizer: RecognizerRunConfig,
    pub loss: MatchWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainRunConfig,
    pub data: GenProfile,
    pub seed: u64,
    pub device: String,
    /// Inference score threshold on the text/background logit.
    pub score_threshold: f64,
    /// Mask binarization threshold when decoding polygons.
    pub mask_threshold: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig { d_model: 256, ..BackboneConfig::default() },
            detector: DetectorConfig::default(),
            rc: RcRunConfig::default(),
            recognizer: RecognizerRunConfig::default(),
            loss: MatchWeights::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainRunConfig::default(),
            data: GenProfile::default(),
            seed: 0,
            device: "cpu".into(),
            score_threshold: 0.4,
            mask_threshold: 0.5,
        }
    }
}

impl RunConfig {
    /// Full-scale documented defaults (d = 256, K = 6, N = 100).
    pub fn full() -> Self {
        let mut cfg = Self::default();
        cfg.backbone.d_model = 256;
        cfg.backbone.embed_dim = 64;
        cfg
    }

    /// Desk-scale profile that overfits a small synthetic set on a CPU.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.backbone = BackboneConfig {
            embed_dim: 16,
            depths: [2, 2, 2, 2],
            heads: [2, 4, 8, 8],
            d_model: 64,
            ..BackboneConfig::default()
        };
        cfg.detector = DetectorConfig {
            n_proposals: 8,
            d_model: 64,
            n_stages: 3,
            d_dyn: 16,
            n_heads: 2,
            n_pca: crate::mask_codec::DEFAULT_N_PCA,
        };
        cfg.recognizer = RecognizerRunConfig { t_max: 6, alphabet: "abc".into() };
        cfg.optimizer = OptimizerConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            cosine_decay: true,
            iters: 2000,
            batch_size: 2,
        };
        cfg.train = TrainRunConfig {
            augment: false,
            checkpoint_every: 500,
            log_every: 25,
            num_images: 20,
            basis_samples: 200,
        };
        cfg.data = GenProfile::toy();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.detector.validate()?;
        self.loss.validate()?;
        if self.backbone.d_model != self.detector.d_model {
            return Err(Error::Config(format!(
                "backbone d_model {} must equal detector d_model {}",
                self.backbone.d_model, self.detector.d_model
            )));
        }
        if self.recognizer.t_max < 2 {
            return Err(Error::Config("recognizer.t_max must be >= 2".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "unsupported device {:?}; only \"cpu\" is available",
                self.device
            )));
        }
        // > 1 is allowed: it disables detections (sigmoid scores never reach it)
        if !(0.0..=1.01).contains(&self.score_threshold) {
            return Err(Error::Config("score_threshold must be in [0, 1.01]".into()));
        }
        if self.optimizer.lr <= 0.0 || self.optimizer.batch_size == 0 {
            return Err(Error::Config("optimizer needs lr > 0 and batch_size > 0".into()));
        }
        if self.train.log_every == 0 {
            return Err(Error::Config("train.log_every must be > 0".into()));
        }
        if self.train.basis_samples < self.detector.n_pca {
            return Err(Error::Config(format!(
                "basis_samples {} < n_pca {}; cannot fit the mask basis",
                self.train.basis_samples, self.detector.n_pca
            )));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
