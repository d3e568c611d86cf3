//! Run configuration: a TOML file with one table per module, overridable by
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dtaad_core::data::NoiseConfig;
use dtaad_core::pot::PotConfig;
use dtaad_core::tcn::{min_layers_dilated, TcnConfig};
use dtaad_core::trainer::TrainerConfig;
use dtaad_core::DtaadConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Leading fraction of the training rows used for fitting.
    pub train_fraction: f64,
    pub noise: NoiseConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            labels: None,
            train_fraction: 1.0,
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub window: usize,
    pub lambda: f64,
    pub encoder_layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub leak: f64,
    /// Feed the local prediction into the global path at inference.
    pub feedback: bool,
    pub local_tcn: bool,
    pub global_tcn: bool,
    pub local_kernel: usize,
    pub local_layers: usize,
    pub global_kernel: usize,
    pub dilation_base: usize,
    /// 0 picks the smallest count covering the window.
    pub global_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            window: 10,
            lambda: 0.8,
            encoder_layers: 1,
            ffn_hidden: 16,
            dropout: 0.2,
            leak: 0.01,
            feedback: true,
            local_tcn: true,
            global_tcn: true,
            local_kernel: 3,
            local_layers: 2,
            global_kernel: 4,
            dilation_base: 2,
            global_layers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub point_adjust: bool,
    pub percents: Vec<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            point_adjust: false,
            percents: vec![100.0, 150.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub trainer: TrainerConfig,
    pub pot: PotConfig,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataSection::default(),
            model: ModelSection::default(),
            trainer: TrainerConfig::default(),
            pot: PotConfig::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(UsageError(format!("config file {} does not exist", path.display())).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Model configuration for a series with `dims` dimensions.
    pub fn model_config(&self, dims: usize) -> Result<DtaadConfig> {
        let s = &self.model;
        let mut cfg = DtaadConfig::new(s.window, dims);
        cfg.lambda = s.lambda;
        cfg.encoder_layers = s.encoder_layers;
        cfg.ffn_hidden = s.ffn_hidden;
        cfg.dropout = s.dropout;
        cfg.leak = s.leak;
        cfg.feedback_at_inference = s.feedback;
        cfg.use_local_tcn = s.local_tcn;
        cfg.use_global_tcn = s.global_tcn;
        cfg.local = TcnConfig {
            kernel_size: s.local_kernel,
            num_layers: s.local_layers,
            dropout: s.dropout,
            leak: s.leak,
            ..TcnConfig::local(dims)
        };
        let global_layers = if s.global_layers == 0 && s.window > 1 && s.global_kernel > 1 && s.dilation_base > 1 {
            min_layers_dilated(s.window, s.global_kernel, s.dilation_base).max(1)
        } else {
            s.global_layers.max(1)
        };
        cfg.global = TcnConfig {
            kernel_size: s.global_kernel,
            dilation_base: s.dilation_base,
            num_layers: global_layers,
            dropout: s.dropout,
            leak: s.leak,
            ..TcnConfig::global(dims, s.window)
        };
        cfg.validate().map_err(|e| UsageError(format!("invalid model configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        let cfg = TrainerConfig {
            seed: self.seed,
            ..self.trainer.clone()
        };
        cfg.validate().map_err(|e| UsageError(format!("invalid trainer configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(UsageError(format!("train fraction {} outside (0, 1]", self.data.train_fraction)).into());
        }
        self.pot.validate().map_err(|e| UsageError(format!("invalid POT configuration: {e}")))?;
        self.data.noise.validate().map_err(|e| UsageError(format!("invalid noise configuration: {e}")))?;
        self.trainer_config()?;
        Ok(())
    }
}
