use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::predictor::{LossMode, ModelConfig};
use crate::preprocess::{DEFAULT_FUTURE, DEFAULT_HISTORY, DEFAULT_ZCA_EPSILON, NUM_FEATURES};
use crate::ssae::SsaeConfig;

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Positions only.
    #[serde(rename = "DCS-LSTM")]
    DcsLstm,
    /// Kinematic features: x, y, dx, v, a, psi, laneId.
    #[serde(rename = "K-Model")]
    KModel,
    /// All ten features, min-max scaled, no autoencoder.
    #[serde(rename = "MM-Model")]
    MmModel,
    /// All ten features, whitened and encoded by the autoencoder.
    #[serde(rename = "VD+DCS-LSTM")]
    VdDcsLstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::DcsLstm, Variant::KModel, Variant::MmModel, Variant::VdDcsLstm];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::DcsLstm => "DCS-LSTM",
            Variant::KModel => "K-Model",
            Variant::MmModel => "MM-Model",
            Variant::VdDcsLstm => "VD+DCS-LSTM",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(tag.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant '{tag}'")))
    }

    /// Indices of the input features the variant sees.
    pub fn feature_mask(self) -> Vec<usize> {
        match self {
            Variant::DcsLstm => vec![0, 1],
            Variant::KModel => vec![0, 1, 2, 3, 4, 5, 9],
            Variant::MmModel | Variant::VdDcsLstm => (0..NUM_FEATURES).collect(),
        }
    }

    pub fn uses_descriptors(self) -> bool {
        self == Variant::VdDcsLstm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        params: SyntheticConfig,
        seed: u64,
    },
    /// NGSIM-format CSV at the source rate.
    Ngsim {
        path: PathBuf,
        #[serde(default)]
        site: String,
        /// Lane centers (feet); estimated from the data when absent.
        #[serde(default)]
        lane_centers: Option<BTreeMap<i32, f64>>,
    },
    /// NDJSON track store at the source rate.
    Store {
        path: PathBuf,
        #[serde(default)]
        lane_centers: Option<BTreeMap<i32, f64>>,
    },
}

/// Restricts windows to ones whose maneuver is visible in the ego history:
/// lane changes must already show lateral motion toward the target lane,
/// lane keeps must show almost none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableFilter {
    pub min_change_lateral_ft: f64,
    pub max_keep_lateral_ft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub source_rate_hz: f64,
    pub rate: usize,
    pub history: usize,
    pub future: usize,
    pub zca_epsilon: f64,
    /// Working frames between consecutive window reference instants.
    pub window_stride: usize,
    pub separable: Option<SeparableFilter>,
    /// Subsample windows so that lane changes make up this fraction.
    pub lane_change_fraction: Option<f64>,
    /// Cap on the number of windows kept (after the other filters).
    pub max_windows: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            source_rate_hz: 10.0,
            rate: 2,
            history: DEFAULT_HISTORY,
            future: DEFAULT_FUTURE,
            zca_epsilon: DEFAULT_ZCA_EPSILON,
            window_stride: 5,
            separable: None,
            lane_change_fraction: None,
            max_windows: None,
        }
    }
}

impl PreprocessConfig {
    pub fn working_rate_hz(&self) -> f64 {
        self.source_rate_hz / self.rate as f64
    }

    /// Future-frame positions closest to each whole second `1..=5`.
    pub fn horizon_indices(&self) -> Vec<usize> {
        (1..=5)
            .map(|s| ((s as f64 * self.working_rate_hz()).round() as usize).max(1) - 1)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub split_fraction: f64,
    pub split_seed: u64,
    /// Fraction of training vehicles held out for validation (0 disables).
    pub validation_fraction: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Rescale each batch gradient to at most this global L2 norm.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

fn default_grad_clip() -> Option<f64> {
    Some(10.0)
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            loss_mode: LossMode::Mixture,
            split_fraction: 0.8,
            split_seed: 0,
            validation_fraction: 0.1,
            patience: None,
            grad_clip: default_grad_clip(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub ssae: SsaeConfig,
    /// Architecture; input width and autoencoder sizes are derived from the
    /// variant when the model is built.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_variant() -> Variant {
    Variant::VdDcsLstm
}

impl ExperimentConfig {
    pub fn synthetic(params: SyntheticConfig, seed: u64) -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic { params, seed },
            preprocess: PreprocessConfig::default(),
            ssae: SsaeConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            variant: Variant::VdDcsLstm,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        if p.rate == 0 || p.history < 2 || p.future == 0 || !(p.source_rate_hz > 0.0) {
            return Err(Error::Config("rate must be ≥ 1, history ≥ 2, future ≥ 1".into()));
        }
        if *p.horizon_indices().last().unwrap() >= p.future {
            return Err(Error::Config(format!(
                "future of {} frames at {} Hz does not reach 5 s",
                p.future,
                p.working_rate_hz()
            )));
        }
        if let Some(f) = p.lane_change_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("lane-change fraction {f} outside (0, 1)")));
            }
        }
        let t = &self.training;
        if t.batch_size == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::Config("batch size and lr must be positive, validation fraction in [0, 1)".into()));
        }
        if self.model.future_len != p.future {
            return Err(Error::Config(format!(
                "decoder length {} differs from future length {}",
                self.model.future_len, p.future
            )));
        }
        if self.variant.uses_descriptors() && self.ssae.sizes.first() != Some(&NUM_FEATURES) {
            return Err(Error::Config(format!("autoencoder input must be {NUM_FEATURES} features")));
        }
        Ok(())
    }

    /// Model architecture for this config's variant.
    pub fn model_config(&self) -> ModelConfig {
        let mask = self.variant.feature_mask();
        ModelConfig {
            input_dim: mask.len(),
            ssae_sizes: self.variant.uses_descriptors().then(|| self.ssae.sizes.clone()),
            future_len: self.preprocess.future,
            ..self.model.clone()
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Hash of everything that determines the windows and the test split, so
    /// that variants can be checked to share identical test data.
    pub fn data_hash(&self) -> String {
        let key = (
            &self.dataset,
            &self.preprocess,
            self.training.split_fraction,
            self.training.split_seed,
        );
        let text = serde_json::to_string(&key).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
