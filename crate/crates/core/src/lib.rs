//! Dual-TCN attention anomaly detector for multivariate time series.
//!
//! The crate bundles a small reverse-mode autodiff engine, the windowing
//! pipeline, the model itself, its trainer, peaks-over-threshold labeling and
//! the evaluation metrics.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pot;
pub mod tcn;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use data::{NoiseConfig, NormalizationStats, RawSeries, WindowedDataset};
pub use error::{DtaadError, Result};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use model::{DtaadConfig, DtaadParams};
pub use params::{Bound, ParamId, ParamStore};
pub use pot::{DimensionThreshold, GpdFit, PotConfig, ThresholdResult};
pub use tcn::{TcnConfig, TcnKind, TcnStack};
pub use tensor::{Real, Tensor};
pub use trainer::{EpochRecord, MamlConfig, OptimizerState, TrainOutcome, TrainerConfig, TrainingState};
