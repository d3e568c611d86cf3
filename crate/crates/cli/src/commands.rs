//! The pipeline stages behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;
use ndarray::{s, Array2};
use serde::Serialize;

use dtaad_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use dtaad_core::data::{
    add_snr_noise, load_csv, make_windows, read_matrix, write_matrix, NormalizationStats, RawSeries, DEFAULT_NORM_EPS,
};
use dtaad_core::metrics::{evaluate, MetricsReport};
use dtaad_core::model::score_dataset;
use dtaad_core::pot::{calibrate, label_and_aggregate, threshold_report, DimensionThreshold};
use dtaad_core::trainer::{train, EpochRecord};
use dtaad_core::DtaadParams;

use crate::config::RunConfig;
use crate::synth::{self, dim_header, SyntheticSpec};
use crate::UsageError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt";
pub const SCORES_FILE: &str = "scores.csv";
pub const LABELS_FILE: &str = "pred_labels.csv";
pub const AGGREGATE_FILE: &str = "pred_aggregate.csv";
pub const PLOT_FILE: &str = "plot_data.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.toml";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.toml";
pub const METRICS_FILE: &str = "metrics.toml";

const SCORE_CHUNK: usize = 512;

fn existing(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| UsageError(format!("no {what} path given")))?;
    if !p.exists() {
        return Err(UsageError(format!("{what} path {} does not exist", p.display())).into());
    }
    Ok(p.clone())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let data = synth::generate(spec)?;
    synth::write(&data, out)?;
    info!(
        "wrote {} train and {} test rows over {} dimensions to {}",
        data.train.nrows(),
        data.test.nrows(),
        spec.dims,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_rows: usize,
    pub param_count: usize,
    pub train_seconds: f64,
    /// Fraction of training timestamps above the calibrated thresholds.
    pub train_positive_rate: f64,
    #[serde(skip)]
    pub history: Vec<EpochRecord>,
    #[serde(skip)]
    pub thresholds: Vec<DimensionThreshold>,
}

/// Leading `ceil(fraction·T)` rows.
fn prefix(series: &RawSeries, fraction: f64) -> RawSeries {
    let keep = ((series.len() as f64 * fraction) - 1e-9).ceil().max(1.0) as usize;
    let keep = keep.min(series.len());
    RawSeries {
        name: series.name.clone(),
        values: series.values.slice(s![..keep, ..]).to_owned(),
        labels: series.labels.as_ref().map(|l| l.slice(s![..keep, ..]).to_owned()),
    }
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let header = ["epoch", "lr", "train_loss", "val_loss", "val_global_loss"].map(String::from);
    let rows = Array2::from_shape_fn((history.len(), 5), |(i, c)| {
        let r = &history[i];
        [r.epoch as f64, r.lr, r.train_loss, r.val_loss, r.val_global_loss][c]
    });
    write_matrix(path, &header, rows.view())?;
    Ok(())
}

/// Preprocessing, training and POT calibration on training scores.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_path = existing(cfg.data.train.as_ref(), "training data")?;
    create_out(&cfg.out)?;
    let started = Instant::now();
    let series = load_csv(&train_path, None).with_context(|| format!("cannot load {}", train_path.display()))?;
    let series = prefix(&series, cfg.data.train_fraction);
    let model_cfg = cfg.model_config(series.dims())?;
    let trainer_cfg = cfg.trainer_config()?;

    let norm = NormalizationStats::fit(series.values.view(), DEFAULT_NORM_EPS)?;
    let clean = norm.apply(series.values.view())?;
    let fit_values = if cfg.data.noise.enabled {
        let mut noise = cfg.data.noise.clone();
        noise.seed ^= cfg.seed;
        add_snr_noise(clean.view(), &noise)?
    } else {
        clean.clone()
    };
    let fit_windows = make_windows(fit_values.view(), model_cfg.window)?;
    let outcome = train::<f32>(&model_cfg, &fit_windows, &trainer_cfg).context("training failed")?;

    let clean_windows = make_windows(clean.view(), model_cfg.window)?;
    let scores = score_dataset(&outcome.params, &clean_windows, SCORE_CHUNK)?;
    let thresholds = calibrate(scores.view(), &cfg.pot)?;
    let finals: Vec<f64> = thresholds.iter().map(|d| d.thr_final).collect();
    let train_labels = label_and_aggregate(scores.view(), &finals)?;
    let positive = train_labels.aggregate.iter().filter(|&&y| y == 1).count();

    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model_cfg.clone(),
        trainer: trainer_cfg.clone(),
        epoch: outcome.best_epoch + 1,
        history: outcome.history.clone(),
        param_count: outcome.params.store.len(),
        optimizer_step: 0,
        normalization: Some(norm.clone()),
        thresholds: Some(finals.clone()),
    };
    save_checkpoint(
        &cfg.out.join(CHECKPOINT_FILE),
        &Checkpoint {
            meta: meta.clone(),
            params: outcome.params.store.clone(),
            optimizer: None,
        },
    )?;
    save_checkpoint(
        &cfg.out.join(LAST_CHECKPOINT_FILE),
        &Checkpoint {
            meta: CheckpointMeta {
                epoch: outcome.last.next_epoch,
                ..meta
            },
            params: outcome.last.params.store.clone(),
            optimizer: Some(outcome.last.optimizer.clone()),
        },
    )?;
    fs::write(cfg.out.join(THRESHOLDS_FILE), threshold_report(&thresholds)?)?;
    write_history(&cfg.out.join(HISTORY_FILE), &outcome.history)?;

    let summary = TrainSummary {
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        train_rows: series.len(),
        param_count: outcome.params.store.num_scalars(),
        train_seconds: started.elapsed().as_secs_f64(),
        train_positive_rate: positive as f64 / series.len() as f64,
        history: outcome.history,
        thresholds,
    };
    fs::write(cfg.out.join(TRAIN_REPORT_FILE), toml::to_string(&summary)?)?;
    info!(
        "trained {} epochs in {:.1}s; thresholds {:?}",
        summary.epochs, summary.train_seconds, finals
    );
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub scores: Array2<f64>,
    pub labels: Array2<u8>,
    pub aggregate: Vec<u8>,
    pub thresholds: Vec<f64>,
    pub seconds: f64,
}

/// Scores `cfg.data.test` with the checkpoint and writes score, label and
/// plot-data files.
pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path) -> Result<DetectOutput> {
    let test_path = existing(cfg.data.test.as_ref(), "test data")?;
    if !checkpoint.exists() {
        return Err(UsageError(format!("checkpoint {} does not exist", checkpoint.display())).into());
    }
    create_out(&cfg.out)?;
    let started = Instant::now();
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let series = load_csv(&test_path, None).with_context(|| format!("cannot load {}", test_path.display()))?;
    let mut model_cfg = ckpt.meta.model.clone();
    if series.dims() != model_cfg.dims {
        return Err(UsageError(format!(
            "{} has {} dimensions but the checkpoint was trained on {}",
            test_path.display(),
            series.dims(),
            model_cfg.dims
        ))
        .into());
    }
    model_cfg.feedback_at_inference = cfg.model.feedback;
    let norm = ckpt
        .meta
        .normalization
        .clone()
        .ok_or_else(|| anyhow::anyhow!("checkpoint carries no normalization statistics"))?;
    let thresholds = ckpt
        .meta
        .thresholds
        .clone()
        .ok_or_else(|| anyhow::anyhow!("checkpoint carries no calibrated thresholds"))?;
    let params = DtaadParams::from_store(&model_cfg, ckpt.params)?;

    let mut values = norm.apply(series.values.view())?;
    if cfg.data.noise.enabled && cfg.data.noise.apply_to_test {
        let mut noise = cfg.data.noise.clone();
        noise.seed ^= cfg.seed.wrapping_add(1);
        values = add_snr_noise(values.view(), &noise)?;
    }
    let windows = make_windows(values.view(), model_cfg.window)?;
    let scores = score_dataset(&params, &windows, SCORE_CHUNK)?;
    let result = label_and_aggregate(scores.view(), &thresholds)?;
    let seconds = started.elapsed().as_secs_f64();

    let m = model_cfg.dims;
    let header = dim_header(m);
    write_matrix(&cfg.out.join(SCORES_FILE), &header, scores.view())?;
    write_matrix(&cfg.out.join(LABELS_FILE), &header, result.labels.mapv(f64::from).view())?;
    let aggregate = Array2::from_shape_fn((scores.nrows(), 2), |(t, c)| {
        if c == 0 {
            scores.row(t).mean().unwrap_or(0.0)
        } else {
            f64::from(result.aggregate[t])
        }
    });
    write_matrix(
        &cfg.out.join(AGGREGATE_FILE),
        &["score_mean".to_string(), "anomaly".to_string()],
        aggregate.view(),
    )?;
    let plot = Array2::from_shape_fn((scores.nrows() * m, 5), |(r, c)| {
        let (t, j) = (r / m, r % m);
        match c {
            0 => t as f64,
            1 => j as f64,
            2 => scores[[t, j]],
            3 => thresholds[j],
            _ => f64::from(result.labels[[t, j]]),
        }
    });
    write_matrix(
        &cfg.out.join(PLOT_FILE),
        &["t", "dim", "score", "threshold", "label"].map(String::from),
        plot.view(),
    )?;
    info!(
        "scored {} rows; {} flagged",
        scores.nrows(),
        result.aggregate.iter().filter(|&&y| y == 1).count()
    );
    Ok(DetectOutput {
        scores,
        labels: result.labels,
        aggregate: result.aggregate,
        thresholds,
        seconds,
    })
}

fn label_matrix(path: &Path) -> Result<Array2<u8>> {
    let (_, raw) = read_matrix(path).with_context(|| format!("cannot read {}", path.display()))?;
    raw.iter().try_for_each(|&v| {
        if v == 0.0 || v == 1.0 {
            Ok(())
        } else {
            Err(anyhow::anyhow!("{} holds a label other than 0 or 1: {v}", path.display()))
        }
    })?;
    Ok(raw.mapv(|v| v as u8))
}

/// Metrics for score and aggregate-label files against ground truth.
pub fn cmd_evaluate(cfg: &RunConfig, scores: &Path, predictions: &Path, runtime: Option<f64>) -> Result<MetricsReport> {
    let truth_path = existing(cfg.data.labels.as_ref(), "ground-truth labels")?;
    for p in [scores, predictions] {
        if !p.exists() {
            return Err(UsageError(format!("{} does not exist", p.display())).into());
        }
    }
    create_out(&cfg.out)?;
    let (_, score_matrix) = read_matrix(scores).with_context(|| format!("cannot read {}", scores.display()))?;
    let (header, pred_matrix) = read_matrix(predictions).with_context(|| format!("cannot read {}", predictions.display()))?;
    let col = header.iter().position(|h| h == "anomaly").unwrap_or(pred_matrix.ncols().saturating_sub(1));
    let pred: Vec<u8> = pred_matrix.column(col).iter().map(|&v| u8::from(v != 0.0)).collect();
    let truth = label_matrix(&truth_path)?;
    if truth.nrows() != score_matrix.nrows() || pred.len() != score_matrix.nrows() {
        return Err(dtaad_core::DtaadError::Shape(format!(
            "row counts differ: {} scores, {} predictions, {} labels",
            score_matrix.nrows(),
            pred.len(),
            truth.nrows()
        ))
        .into());
    }
    let entity: Vec<u8> = truth.rows().into_iter().map(|r| r.iter().copied().max().unwrap_or(0)).collect();
    let dim_truth = (truth.ncols() == score_matrix.ncols() && truth.ncols() > 1).then(|| truth.view());
    let mut report = evaluate(
        score_matrix.view(),
        &pred,
        &entity,
        dim_truth,
        &cfg.metrics.percents,
        cfg.metrics.point_adjust,
    )?;
    report.runtime_seconds = runtime;
    fs::write(cfg.out.join(METRICS_FILE), report.to_toml())?;
    info!(
        "precision {:.4} recall {:.4} f1 {:.4} auc {:.4}",
        report.precision, report.recall, report.f1, report.auc
    );
    Ok(report)
}

/// Train, detect and evaluate in one go.
pub fn cmd_run(cfg: &RunConfig) -> Result<(TrainSummary, DetectOutput, MetricsReport)> {
    let started = Instant::now();
    let summary = cmd_train(cfg)?;
    let detect = cmd_detect(cfg, &cfg.out.join(CHECKPOINT_FILE))?;
    let runtime = started.elapsed().as_secs_f64();
    let report = cmd_evaluate(
        cfg,
        &cfg.out.join(SCORES_FILE),
        &cfg.out.join(AGGREGATE_FILE),
        Some(runtime),
    )?;
    Ok((summary, detect, report))
}
