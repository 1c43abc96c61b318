use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::diffcore::DType;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr_start: f64,
    pub base_lr_end: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Skip weight decay on batch-norm gamma and beta.
    pub exclude_bn_from_weight_decay: bool,
    pub alpha: f64,
    pub epochs: usize,
    /// Defaults to ceil((labeled + unlabeled) / batch_size).
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Share of each batch drawn from the labeled set when unlabeled data
    /// is present.
    pub labeled_fraction_per_batch: f64,
    pub dtype: DType,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

/// Desk-scale network: 24-pixel input down to a 3×3 feature map.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        input_size: 24,
        in_channels: 3,
        backbone_channels: vec![16, 32, 32],
        feature_side: 3,
        embed_dim: 32,
        ..ModelConfig::default()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr_start: 0.03,
            base_lr_end: 0.01,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            exclude_bn_from_weight_decay: false,
            alpha: crate::losses::DEFAULT_ALPHA,
            epochs: 30,
            steps_per_epoch: None,
            seed: 0,
            labeled_fraction_per_batch: 0.5,
            dtype: DType::F32,
            augment: AugmentConfig::default(),
            model: desk_model(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate(self.model.input_size)?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if !(self.labeled_fraction_per_batch > 0.0 && self.labeled_fraction_per_batch <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction_per_batch {} outside (0, 1]",
                self.labeled_fraction_per_batch
            )));
        }
        let lrs = [self.base_lr_start, self.base_lr_end];
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::Config(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config(
                "momentum must be in [0,1), weight_decay and alpha >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
