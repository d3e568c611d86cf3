//! Ingestion, min-max normalization, SNR-calibrated noise augmentation and
//! copy-filled sliding windows.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, DtaadError, Result};

/// A multivariate series, one row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub values: Array2<f64>,
    /// `T x 1` (entity-level) or `T x m` (per-dimension) 0/1 labels.
    pub labels: Option<Array2<u8>>,
}

impl RawSeries {
    pub fn new(name: impl Into<String>, values: Array2<f64>, labels: Option<Array2<u8>>) -> Result<Self> {
        if let Some(l) = &labels {
            check_labels(l, values.nrows(), values.ncols())?;
        }
        Ok(Self { name: name.into(), values, labels })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    /// Labels replicated to one column per dimension.
    pub fn per_dimension_labels(&self) -> Option<Array2<u8>> {
        let l = self.labels.as_ref()?;
        if l.ncols() == self.dims() {
            return Some(l.clone());
        }
        Some(Array2::from_shape_fn((l.nrows(), self.dims()), |(t, _)| l[[t, 0]]))
    }

    /// Entity-level labels: 1 where any dimension is anomalous.
    pub fn entity_labels(&self) -> Option<Vec<u8>> {
        self.labels
            .as_ref()
            .map(|l| l.rows().into_iter().map(|r| r.iter().copied().max().unwrap_or(0)).collect())
    }

    /// Splits rows at `fraction` of the length (leading part first).
    pub fn split(&self, fraction: f64) -> Result<(RawSeries, RawSeries)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(invalid(format!("split fraction {fraction} outside (0, 1)")));
        }
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let part = |lo: usize, hi: usize, suffix: &str| RawSeries {
            name: format!("{}-{suffix}", self.name),
            values: self.values.slice(s![lo..hi, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l.slice(s![lo..hi, ..]).to_owned()),
        };
        Ok((part(0, cut, "train"), part(cut, self.len(), "test")))
    }
}

fn check_labels(labels: &Array2<u8>, rows: usize, dims: usize) -> Result<()> {
    if labels.nrows() != rows {
        return Err(shape(format!(
            "label file has {} rows but the series has {rows}",
            labels.nrows()
        )));
    }
    if labels.ncols() != 1 && labels.ncols() != dims {
        return Err(shape(format!(
            "label file has {} columns; expected 1 or {dims}",
            labels.ncols()
        )));
    }
    if labels.iter().any(|&v| v > 1) {
        return Err(invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Reads a headered numeric CSV into a row-major matrix.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let cols = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // rows are 1-based and the header is row 1
        let row = r + 2;
        if record.len() != cols {
            return Err(DtaadError::Parse {
                row,
                column: record.len().min(cols) + 1,
                message: format!("expected {cols} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DtaadError::Parse {
                row,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| shape(e.to_string()))?;
    Ok((header, m))
}

/// Loads a dataset CSV and optional label CSV.
pub fn load_csv(path: &Path, label_path: Option<&Path>) -> Result<RawSeries> {
    let (_, values) = read_matrix(path)?;
    let labels = match label_path {
        Some(lp) => {
            let (_, raw) = read_matrix(lp)?;
            let mut labels = Array2::<u8>::zeros(raw.dim());
            for ((t, c), &v) in raw.indexed_iter() {
                labels[[t, c]] = match v {
                    x if x == 0.0 => 0,
                    x if x == 1.0 => 1,
                    x => {
                        return Err(DtaadError::Parse {
                            row: t + 2,
                            column: c + 1,
                            message: format!("label must be 0 or 1, found {x}"),
                        })
                    }
                };
            }
            Some(labels)
        }
        None => None,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    RawSeries::new(name, values, labels)
}

/// Formats with 9 significant digits, `%g` style.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can bump the exponent (9.9999999996 -> 10.0000000)
    let sci = format!("{x:.8e}");
    let (mantissa, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().expect("exponent");
    let exp = exp.max(e);
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{e}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes a headered CSV of floats (9 significant digits).
pub fn write_matrix(path: &Path, header: &[String], rows: ArrayView2<'_, f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for row in rows.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Per-dimension min/max fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub eps: f64,
}

pub const DEFAULT_NORM_EPS: f64 = 1e-9;

impl NormalizationStats {
    pub fn fit(values: ArrayView2<'_, f64>, eps: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(invalid("cannot normalize an empty series"));
        }
        if !(eps > 0.0) {
            return Err(invalid("normalization eps must be positive"));
        }
        let min = values
            .axis_iter(Axis(1))
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let max = values
            .axis_iter(Axis(1))
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Self { min, max, eps })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// `(x - min) / (max - min + eps)`; values outside the fitted range are kept.
    pub fn apply(&self, values: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(values.ncols())?;
        let mut out = values.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let denom = self.max[j] - self.min[j] + self.eps;
            col.mapv_inplace(|x| (x - self.min[j]) / denom);
        }
        Ok(out)
    }

    pub fn invert(&self, values: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(values.ncols())?;
        let mut out = values.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let denom = self.max[j] - self.min[j] + self.eps;
            col.mapv_inplace(|x| x * denom + self.min[j]);
        }
        Ok(out)
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dims() {
            return Err(shape(format!(
                "series has {cols} dimensions, statistics were fitted on {}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Fits statistics on `series` and returns its normalized values.
pub fn fit_normalize(series: &RawSeries, eps: f64) -> Result<(Array2<f64>, NormalizationStats)> {
    let stats = NormalizationStats::fit(series.values.view(), eps)?;
    let normalized = stats.apply(series.values.view())?;
    Ok((normalized, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub snr_db: f64,
    pub attenuation: f64,
    pub seed: u64,
    pub apply_to_test: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            snr_db: 50.0,
            attenuation: 100.0,
            seed: 0,
            apply_to_test: false,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(invalid("snr_db must be finite"));
        }
        if !(self.attenuation > 0.0) {
            return Err(invalid("noise attenuation must be positive"));
        }
        Ok(())
    }
}

/// Gaussian noise rescaled per dimension so that the signal-to-noise power
/// ratio is exactly `snr_db`. All-zero columns get zero noise.
pub fn calibrated_noise(x: ArrayView2<'_, f64>, cfg: &NoiseConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise = Array2::from_shape_simple_fn(x.dim(), || StandardNormal.sample(&mut rng));
    let ratio = 10f64.powf(-cfg.snr_db / 10.0);
    for (j, mut col) in noise.axis_iter_mut(Axis(1)).enumerate() {
        let signal: f64 = x.column(j).iter().map(|v| v * v).sum();
        let power: f64 = col.iter().map(|v| v * v).sum();
        if signal == 0.0 || power == 0.0 {
            col.fill(0.0);
            continue;
        }
        let scale = (signal * ratio / power).sqrt();
        col.mapv_inplace(|v| v * scale);
    }
    Ok(noise)
}

/// `x + eps / attenuation` with `eps` from [`calibrated_noise`].
pub fn add_snr_noise(x: ArrayView2<'_, f64>, cfg: &NoiseConfig) -> Result<Array2<f64>> {
    let noise = calibrated_noise(x, cfg)?;
    Ok(&x + &(noise / cfg.attenuation))
}

/// Measured signal-to-noise ratio in dB.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    let s: f64 = signal.iter().map(|v| v * v).sum();
    let n: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (s / n).log10()
}

/// Stride-1 windows over a normalized series, one per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `N x K x m`.
    pub windows: Array3<f64>,
    /// `N x m`, the last observation of each window.
    pub targets: Array2<f64>,
    pub labels: Option<Array2<u8>>,
    pub window_size: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.windows.len_of(Axis(2))
    }

    /// Windows `[lo, hi)` as a new dataset.
    pub fn slice(&self, lo: usize, hi: usize) -> WindowedDataset {
        WindowedDataset {
            windows: self.windows.slice(s![lo..hi, .., ..]).to_owned(),
            targets: self.targets.slice(s![lo..hi, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l.slice(s![lo..hi, ..]).to_owned()),
            window_size: self.window_size,
        }
    }

    /// Flattened `B x K x m` values of the windows at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let per = self.window_size * self.dims();
        let flat = self.windows.as_slice().expect("windows are contiguous");
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(&flat[i * per..(i + 1) * per]);
        }
        out
    }
}

/// Builds one window per timestamp; history before the first row is filled
/// by repeating the first row.
pub fn make_windows(x: ArrayView2<'_, f64>, window: usize) -> Result<WindowedDataset> {
    if window == 0 {
        return Err(invalid("window size must be at least 1"));
    }
    let (t_len, m) = x.dim();
    if t_len == 0 {
        return Err(invalid("cannot window an empty series"));
    }
    let mut windows = Array3::<f64>::zeros((t_len, window, m));
    for t in 0..t_len {
        for p in 0..window {
            let src = (t + p + 1).saturating_sub(window);
            windows.slice_mut(s![t, p, ..]).assign(&x.row(src));
        }
    }
    Ok(WindowedDataset {
        windows,
        targets: x.to_owned(),
        labels: None,
        window_size: window,
    })
}

impl WindowedDataset {
    pub fn with_labels(mut self, labels: Option<Array2<u8>>) -> Result<Self> {
        if let Some(l) = &labels {
            check_labels(l, self.len(), self.dims())?;
        }
        self.labels = labels;
        Ok(self)
    }
}

/// Keeps the leading `ceil(fraction * N)` windows.
pub fn subsample_train(ds: &WindowedDataset, fraction: f64) -> Result<WindowedDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("train fraction {fraction} outside (0, 1]")));
    }
    let keep = ((fraction * ds.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(ds.slice(0, keep.min(ds.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn load_csv_shapes_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_tmp(&dir, "d.csv", "a,b\n1,2\n3,4\n5,6\n");
        let labels = write_tmp(&dir, "l.csv", "y\n0\n1\n0\n");
        let s = load_csv(&data, Some(&labels)).unwrap();
        assert_eq!((s.len(), s.dims()), (3, 2));
        let per = s.per_dimension_labels().unwrap();
        assert_eq!(per, array![[0, 0], [1, 1], [0, 0]]);
        assert_eq!(s.entity_labels().unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn load_csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write_tmp(&dir, "bad.csv", "a,b\n1,2\n3,x\n");
        match load_csv(&bad, None) {
            Err(DtaadError::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
        let data = write_tmp(&dir, "d.csv", "a,b\n1,2\n3,4\n5,6\n");
        let short = write_tmp(&dir, "l.csv", "y\n0\n1\n");
        let err = load_csv(&data, Some(&short)).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn normalization_examples() {
        let s = RawSeries::new("x", array![[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]], None).unwrap();
        let (n, stats) = fit_normalize(&s, DEFAULT_NORM_EPS).unwrap();
        assert!((n[[1, 0]] - 0.5).abs() < 1e-8);
        assert_eq!(n[[0, 0]], 0.0);
        assert!(n.column(1).iter().all(|&v| v == 0.0));
        let back = stats.invert(n.view()).unwrap();
        assert!((back[[2, 0]] - 6.0).abs() < 1e-5);
        let empty = RawSeries::new("e", Array2::zeros((0, 2)), None).unwrap();
        assert!(fit_normalize(&empty, 1e-9).is_err());
    }

    #[test]
    fn noise_hits_target_snr() {
        let x = Array2::from_elem((100, 1), 1.0);
        let cfg = NoiseConfig { seed: 9, ..NoiseConfig::default() };
        let eps = calibrated_noise(x.view(), &cfg).unwrap();
        let power: f64 = eps.iter().map(|v| v * v).sum();
        assert!((power - 1e-3).abs() < 1e-15);
        let rms = (power / 100.0).sqrt();
        assert!((rms - 0.00316).abs() < 1e-5);
        let measured = snr_db(x.as_slice().unwrap(), eps.as_slice().unwrap());
        assert!((measured - 50.0).abs() < 1e-6);
        let noisy = add_snr_noise(x.view(), &cfg).unwrap();
        let max_eps = eps.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_pert = (&noisy - &x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_pert <= max_eps / 100.0 + 1e-15);
    }

    #[test]
    fn zero_column_gets_no_noise() {
        let x = array![[0.0, 1.0], [0.0, 2.0]];
        let eps = calibrated_noise(x.view(), &NoiseConfig::default()).unwrap();
        assert!(eps.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn copy_fill_windows() {
        let x = array![[1.0], [2.0], [3.0]];
        let ds = make_windows(x.view(), 3).unwrap();
        let w: Vec<Vec<f64>> = (0..3).map(|i| ds.windows.slice(s![i, .., 0]).to_vec()).collect();
        assert_eq!(w, vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 2.0], vec![1.0, 2.0, 3.0]]);
        let one = make_windows(x.view(), 1).unwrap();
        assert_eq!(one.windows.slice(s![.., 0, 0]).to_vec(), vec![1.0, 2.0, 3.0]);
        assert!(make_windows(x.view(), 0).is_err());
        let long = Array2::zeros((1000, 4));
        let ds = make_windows(long.view(), 10).unwrap();
        assert_eq!(ds.windows.dim(), (1000, 10, 4));
    }

    #[test]
    fn subsample_prefix() {
        let ds = make_windows(Array2::zeros((1000, 1)).view(), 10).unwrap();
        assert_eq!(subsample_train(&ds, 0.2).unwrap().len(), 200);
        assert_eq!(subsample_train(&ds, 1.0).unwrap().len(), 1000);
        let small = ds.slice(0, 100);
        assert_eq!(subsample_train(&small, 0.001).unwrap().len(), 1);
        assert!(subsample_train(&ds, 0.0).is_err());
        assert!(subsample_train(&ds, 1.5).is_err());
    }

    #[test]
    fn float_format_has_nine_significant_digits() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(0.123456789123), "0.123456789");
        assert_eq!(format_float(123456.789123), "123456.789");
        assert_eq!(format_float(1.5e-7), "1.5e-7");
        assert_eq!(format_float(-2.5e12), "-2.5e12");
        assert_eq!(format_float(9.9999999996), "10");
        for x in [0.1, 1.0 / 3.0, 12345.678, 7.25e-9] {
            let back: f64 = format_float(x).parse().unwrap();
            assert!(((back - x) / x).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_count_matches_length(t_len in 1usize..60, k in 1usize..15, m in 1usize..4) {
                let x = Array2::from_shape_fn((t_len, m), |(t, j)| (t * 7 + j) as f64);
                let ds = make_windows(x.view(), k).unwrap();
                prop_assert_eq!(ds.len(), t_len);
                for i in 0..t_len {
                    prop_assert_eq!(ds.windows.slice(s![i, k - 1, ..]), ds.targets.row(i));
                }
            }

            #[test]
            fn normalize_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
                let x = Array2::from_shape_vec((vals.len(), 1), vals).unwrap();
                let stats = NormalizationStats::fit(x.view(), DEFAULT_NORM_EPS).unwrap();
                prop_assume!(stats.max[0] - stats.min[0] > 1e-3);
                let n = stats.apply(x.view()).unwrap();
                prop_assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let back = stats.invert(n.view()).unwrap();
                for (a, b) in back.iter().zip(x.iter()) {
                    prop_assert!((a - b).abs() < 1e-5);
                }
            }

            #[test]
            fn noise_is_seed_deterministic(seed in 0u64..1000) {
                let x = Array2::from_shape_fn((30, 2), |(t, j)| ((t + j) as f64).sin() + 1.5);
                let cfg = NoiseConfig { seed, ..NoiseConfig::default() };
                let a = add_snr_noise(x.view(), &cfg).unwrap();
                let b = add_snr_noise(x.view(), &cfg).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
