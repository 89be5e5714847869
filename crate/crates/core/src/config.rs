//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! steps = 500
//! batch_size = 16
//! learning_rate = 0.05
//! momentum = 0.97
//! index_mode = "ema"        # or "fresh"
//! wrap = "circular"         # or "strict"
//!
//! [dataset]
//! kind = "blobs2d"          # "waves1d", or "idx" with `images`/`labels` paths
//! samples = 256
//! noise = 0.1
//!
//! [[model.layer]]
//! kind = "conv2d"
//! out = 8
//! kernel = 3
//! epitome = [3, 3, 3, 4]
//! groups = [1, 1]
//!
//! [[model.layer]]
//! kind = "relu"
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{NesError, Result};
use crate::routing::DEFAULT_MOMENTUM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    /// Forward with the learner's fresh indices, then update the map.
    Fresh,
    /// Update the map first, then forward with the map's entries, so the
    /// frozen map reproduces training exactly.
    #[default]
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WrapSetting {
    #[default]
    Circular,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs2d {
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Waves1d {
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

fn default_noise() -> f64 {
    0.1
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Epitome settings shared by the three epitome layer kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpitomeSpec {
    pub out: usize,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// `[W^E, H^E, C^E_in, C^E_out]`.
    pub epitome: [usize; 4],
    /// Block sizes `[beta_in, beta_out]`; default the epitome channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<[usize; 2]>,
    /// Super-index group lengths `[l_in, l_out]`; default gcd(block size, epitome channels).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<[usize; 2]>,
    #[serde(default = "yes")]
    pub learner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelLayerConfig {
    Conv2d(EpitomeSpec),
    Conv1d(EpitomeSpec),
    Fc(EpitomeSpec),
    Dense { out: usize },
    Relu,
    Tanh,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "layer")]
    pub layers: Vec<ModelLayerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub index_mode: IndexMode,
    #[serde(default)]
    pub wrap: WrapSetting,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

pub const TOY_BLOBS2D_TOML: &str = include_str!("../assets/toy_blobs2d.toml");
pub const TOY_WAVES1D_TOML: &str = include_str!("../assets/toy_waves1d.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            NesError::parse(e.span().map(|s| s.start).unwrap_or(0), e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NesError::config(e.to_string()))
    }

    /// The bundled toy experiments: `blobs2d` or `waves1d`.
    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "blobs2d" => Self::from_toml(TOY_BLOBS2D_TOML),
            "waves1d" => Self::from_toml(TOY_WAVES1D_TOML),
            other => Err(NesError::config(format!("no bundled experiment named {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(NesError::config("batch_size must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(NesError::config("learning_rate must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(NesError::config("momentum must lie in [0, 1]"));
        }
        if let DatasetConfig::Blobs2d { samples, noise } | DatasetConfig::Waves1d { samples, noise } = &self.dataset {
            if *samples == 0 || !noise.is_finite() || *noise < 0.0 {
                return Err(NesError::config("dataset needs samples >= 1 and a finite noise >= 0"));
            }
        }
        if self.model.layers.is_empty() {
            return Err(NesError::config("model has no layers"));
        }
        Ok(())
    }
}
