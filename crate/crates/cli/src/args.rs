//! Command-line flags and how they override the configuration file.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::synth::SyntheticSpec;

#[derive(Debug, Parser)]
#[command(name = "dtaad", version, about = "Dual-TCN attention anomaly detection for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark (train.csv, test.csv, labels.csv).
    Synth(SynthArgs),
    /// Train a model and calibrate thresholds on training scores.
    Train(CommonArgs),
    /// Score a test series with a trained checkpoint.
    Detect(DetectArgs),
    /// Compute metrics from score and label files.
    Evaluate(EvaluateArgs),
    /// Train, detect and evaluate in one go.
    Run(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub test: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub window: Option<usize>,
    #[arg(long, value_name = "X")]
    pub lambda: Option<f64>,
    #[arg(long = "train-fraction", value_name = "X")]
    pub train_fraction: Option<f64>,
    #[arg(long, value_name = "X")]
    pub q: Option<f64>,
    #[arg(long = "low-quantile", value_name = "X")]
    pub low_quantile: Option<f64>,
    #[arg(long, value_enum)]
    pub feedback: Option<Switch>,
    #[arg(long, value_enum)]
    pub maml: Option<Switch>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long = "point-adjust", value_enum)]
    pub point_adjust: Option<Switch>,
}

impl CommonArgs {
    /// The configuration file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.train {
            cfg.data.train = Some(p.clone());
        }
        if let Some(p) = &self.test {
            cfg.data.test = Some(p.clone());
        }
        if let Some(p) = &self.labels {
            cfg.data.labels = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.window {
            cfg.model.window = w;
        }
        if let Some(l) = self.lambda {
            cfg.model.lambda = l;
        }
        if let Some(f) = self.train_fraction {
            cfg.data.train_fraction = f;
        }
        if let Some(q) = self.q {
            cfg.pot.q = q;
        }
        if let Some(lq) = self.low_quantile {
            cfg.pot.low_quantile = lq;
        }
        if let Some(s) = self.feedback {
            cfg.model.feedback = s.is_on();
        }
        if let Some(s) = self.maml {
            cfg.trainer.maml.enabled = s.is_on();
        }
        if let Some(e) = self.epochs {
            cfg.trainer.max_epochs = e;
        }
        if let Some(s) = self.point_adjust {
            cfg.metrics.point_adjust = s.is_on();
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Defaults to `<out>/scores.csv`.
    #[arg(long, value_name = "PATH")]
    pub scores: Option<PathBuf>,
    /// Aggregate prediction file; defaults to `<out>/pred_aggregate.csv`.
    #[arg(long, value_name = "PATH")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "M")]
    pub dims: Option<usize>,
    #[arg(long, value_name = "T")]
    pub length: Option<usize>,
    #[arg(long = "spike-rate", value_name = "X")]
    pub spike_rate: Option<f64>,
    #[arg(long = "level-shift-rate", value_name = "X")]
    pub level_shift_rate: Option<f64>,
    #[arg(long = "noise-burst-rate", value_name = "X")]
    pub noise_burst_rate: Option<f64>,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            seed: self.seed.unwrap_or(d.seed),
            dims: self.dims.unwrap_or(d.dims),
            length: self.length.unwrap_or(d.length),
            spike_rate: self.spike_rate.unwrap_or(d.spike_rate),
            level_shift_rate: self.level_shift_rate.unwrap_or(d.level_shift_rate),
            noise_burst_rate: self.noise_burst_rate.unwrap_or(d.noise_burst_rate),
            ..d
        }
    }
}
