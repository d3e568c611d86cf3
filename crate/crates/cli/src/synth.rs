//! Synthetic multivariate benchmark: sinusoid mixtures with injected
//! point spikes, level shifts and noise bursts.

use std::f64::consts::TAU;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dtaad_core::data::write_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub dims: usize,
    /// Rows in each of the train and test splits.
    pub length: usize,
    /// Sinusoids summed per dimension.
    pub components: usize,
    pub min_period: f64,
    pub max_period: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Expected fraction of test rows carrying a spike.
    pub spike_rate: f64,
    /// Expected fraction of test rows inside a level shift.
    pub level_shift_rate: f64,
    /// Expected fraction of test rows inside a noise burst.
    pub noise_burst_rate: f64,
    pub segment_length: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: 5,
            length: 10_000,
            components: 2,
            min_period: 20.0,
            max_period: 200.0,
            noise_std: 0.01,
            spike_rate: 0.005,
            level_shift_rate: 0.0,
            noise_burst_rate: 0.0,
            segment_length: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.length == 0 || self.components == 0 {
            bail!("dims, length and components must be at least 1");
        }
        if !(self.min_period > 1.0 && self.max_period >= self.min_period) {
            bail!("periods must satisfy 1 < min_period <= max_period");
        }
        if !(self.noise_std >= 0.0) {
            bail!("noise_std must be non-negative");
        }
        let rates = [self.spike_rate, self.level_shift_rate, self.noise_burst_rate];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            bail!("anomaly rates must be non-negative");
        }
        let total: f64 = rates.iter().sum();
        if !(total > 0.0 && total <= 0.2) {
            bail!("total anomaly rate {total} outside (0, 0.2]");
        }
        if self.segment_length == 0 {
            bail!("segment_length must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Array2<f64>,
    pub test: Array2<f64>,
    /// Per-dimension test labels.
    pub labels: Array2<u8>,
}

struct Wave {
    amplitude: f64,
    period: f64,
    phase: f64,
}

fn signal(waves: &[Vec<Wave>], offsets: &[f64], start: usize, len: usize, noise: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = rand_distr::Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    Array2::from_shape_fn((len, waves.len()), |(t, j)| {
        let x = (start + t) as f64;
        let base: f64 = waves[j].iter().map(|w| w.amplitude * (TAU * x / w.period + w.phase).sin()).sum();
        let eps = if noise > 0.0 { rng.sample(normal) } else { 0.0 };
        offsets[j] + base + eps
    })
}

fn pick_dims(m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = rng.random_range(1..=m.div_ceil(2));
    rand::seq::index::sample(rng, m, count).into_vec()
}

/// Deterministic in `spec.seed`. The test split continues the train split
/// in time; anomalies are injected into the test split only.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.dims;
    let waves: Vec<Vec<Wave>> = (0..m)
        .map(|_| {
            (0..spec.components)
                .map(|_| Wave {
                    amplitude: rng.random_range(0.5..1.5),
                    period: spec.min_period * (spec.max_period / spec.min_period).powf(rng.random::<f64>()),
                    phase: rng.random_range(0.0..TAU),
                })
                .collect()
        })
        .collect();
    let offsets: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let train = signal(&waves, &offsets, 0, spec.length, spec.noise_std, &mut rng);
    let mut test = signal(&waves, &offsets, spec.length, spec.length, spec.noise_std, &mut rng);
    let mut labels = Array2::<u8>::zeros(test.dim());

    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..m)
        .map(|j| {
            let c = train.column(j);
            (c.fold(f64::INFINITY, |a, &b| a.min(b)), c.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        })
        .unzip();

    for t in 0..spec.length {
        if rng.random::<f64>() < spec.spike_rate {
            for j in pick_dims(m, &mut rng) {
                let range = hi[j] - lo[j];
                let mid = (hi[j] + lo[j]) / 2.0;
                // push away from the centre so the spike leaves the normal range
                let sign = if test[[t, j]] >= mid { 1.0 } else { -1.0 };
                test[[t, j]] += sign * rng.random_range(0.6..1.0) * range;
                labels[[t, j]] = 1;
            }
        }
    }
    let seg = spec.segment_length;
    for (rate, kind) in [(spec.level_shift_rate, 0), (spec.noise_burst_rate, 1)] {
        if rate == 0.0 {
            continue;
        }
        let start_p = rate / seg as f64;
        for t0 in 0..spec.length {
            if rng.random::<f64>() >= start_p {
                continue;
            }
            let end = (t0 + seg).min(spec.length);
            for j in pick_dims(m, &mut rng) {
                let range = hi[j] - lo[j];
                let shift = if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.3..0.6) * range;
                let burst = rand_distr::Normal::new(0.0, 0.3 * range).expect("valid std");
                for t in t0..end {
                    test[[t, j]] += if kind == 0 { shift } else { rng.sample(burst) };
                    labels[[t, j]] = 1;
                }
            }
        }
    }
    Ok(SyntheticData { train, test, labels })
}

pub fn dim_header(m: usize) -> Vec<String> {
    (0..m).map(|j| format!("dim_{j}")).collect()
}

/// Writes `train.csv`, `test.csv` and `labels.csv` into `out`.
pub fn write(data: &SyntheticData, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let header = dim_header(data.train.ncols());
    write_matrix(&out.join("train.csv"), &header, data.train.view())
        .with_context(|| format!("cannot write {}", out.join("train.csv").display()))?;
    write_matrix(&out.join("test.csv"), &header, data.test.view())
        .with_context(|| format!("cannot write {}", out.join("test.csv").display()))?;
    let labels = data.labels.mapv(f64::from);
    write_matrix(&out.join("labels.csv"), &header, labels.view())
        .with_context(|| format!("cannot write {}", out.join("labels.csv").display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_rejected() {
        let spec = SyntheticSpec {
            spike_rate: 0.0,
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
        let spec = SyntheticSpec {
            spike_rate: 0.25,
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn spike_count_is_binomial() {
        let data = generate(&SyntheticSpec::default()).unwrap();
        let positive = data.labels.rows().into_iter().filter(|r| r.iter().any(|&v| v == 1)).count() as f64;
        let (n, p) = (10_000.0, 0.005);
        let var = n * p * (1.0 - p);
        assert!((positive - n * p).abs() <= 3.0 * var.sqrt(), "{positive}");
    }

    #[test]
    fn segments_are_labeled() {
        let spec = SyntheticSpec {
            length: 2000,
            spike_rate: 0.0,
            level_shift_rate: 0.05,
            noise_burst_rate: 0.05,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let clean = generate(&SyntheticSpec {
            spike_rate: 1e-9,
            level_shift_rate: 0.0,
            noise_burst_rate: 0.0,
            ..spec.clone()
        })
        .unwrap();
        // unlabeled points are untouched
        for ((t, j), &y) in data.labels.indexed_iter() {
            if y == 0 {
                assert_eq!(data.test[[t, j]], clean.test[[t, j]]);
            }
        }
        assert!(data.labels.iter().any(|&y| y == 1));
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec {
            length: 500,
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }
}
