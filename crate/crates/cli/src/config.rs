//! Experiment configuration, read from TOML. Command-line flags override
//! individual fields after loading.

use std::path::{Path, PathBuf};

use pnpttt_core::denoiser::DenoiserConfig;
use pnpttt_core::deq::DeqBackwardConfig;
use pnpttt_core::experiment::ShiftSettings;
use pnpttt_core::fixed_point::{AndersonConfig, PnPConfig};
use pnpttt_core::training::TrainConfig;
use pnpttt_core::ttt::TttConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// First seed of the generated training images.
    pub data: u64,
    pub mask: u64,
    /// Weight initialization, patch sampling and minibatch order.
    pub init: u64,
    pub measurement: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 1000, mask: 0, init: 7, measurement: 0 }
    }
}

impl Seeds {
    pub fn set_all(&mut self, seed: u64) {
        *self = Self { data: seed, mask: seed, init: seed, measurement: seed };
    }

    /// First seed of the held-out test images, disjoint from any realistic
    /// training range.
    pub fn test_data(&self) -> u64 {
        self.data.wrapping_add(TEST_SEED_OFFSET)
    }
}

pub const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub image_size: usize,
    pub cs_ratios: Vec<f64>,
    pub num_test_images: usize,
    pub num_train_images: usize,
    /// Measurement noise standard deviation (zero for the noiseless setting).
    pub noise_sigma: f64,
    pub record_wall_time: bool,
    pub seeds: Seeds,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub pnp: PnPConfig,
    pub anderson: AndersonConfig,
    pub ttt: TttConfig,
    /// Prior trained on the mismatched (texture) distribution.
    pub natural_checkpoint: Option<PathBuf>,
    /// Prior trained on the test (phantom) distribution.
    pub matched_checkpoint: Option<PathBuf>,
    /// Test images; generated from `seeds` when absent.
    pub test_data: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "shift".into(),
            image_size: 64,
            cs_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            num_test_images: 10,
            num_train_images: 40,
            noise_sigma: 0.0,
            record_wall_time: false,
            seeds: Seeds::default(),
            denoiser: DenoiserConfig { depth: 4, channels: 8, lipschitz_target: 1.5, ..Default::default() },
            train: TrainConfig { epochs: 30, ..Default::default() },
            pnp: PnPConfig::default(),
            anderson: AndersonConfig::default(),
            ttt: TttConfig::default(),
            natural_checkpoint: None,
            matched_checkpoint: None,
            test_data: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: pnpttt_core::Error| CliError::Config(e.to_string());
        if self.image_size < 32 {
            return Err(CliError::Config("image_size must be at least 32".into()));
        }
        self.denoiser.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.shift_settings().validate().map_err(cfg)
    }

    pub fn deq(&self) -> DeqBackwardConfig {
        DeqBackwardConfig { anderson: self.anderson.clone(), ..Default::default() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seeds.init, ..self.train.clone() }
    }

    pub fn shift_settings(&self) -> ShiftSettings {
        ShiftSettings {
            experiment_id: self.experiment_id.clone(),
            cs_ratios: self.cs_ratios.clone(),
            mask_seed: self.seeds.mask,
            measurement_seed: self.seeds.measurement,
            noise_sigma: self.noise_sigma,
            pnp: self.pnp.clone(),
            deq: self.deq(),
            ttt: self.ttt.clone(),
            record_wall_time: self.record_wall_time,
        }
    }
}
