//! Peaks-over-threshold thresholds from a generalized Pareto tail fit.

use log::warn;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DtaadError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PotConfig {
    /// Tail risk probability.
    pub q: f64,
    /// Fraction of scores above the initial threshold.
    pub low_quantile: f64,
}

impl Default for PotConfig {
    fn default() -> Self {
        Self {
            q: 1e-4,
            low_quantile: 0.001,
        }
    }
}

impl PotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(invalid(format!("q {} outside (0, 1)", self.q)));
        }
        if !(self.low_quantile > 0.0 && self.low_quantile < 1.0) {
            return Err(invalid(format!("low quantile {} outside (0, 1)", self.low_quantile)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub gamma: f64,
    pub beta: f64,
    pub thr: f64,
    pub n: usize,
    pub n_thr: usize,
}

/// Nearest-rank upper quantile: the smallest score with at most
/// `⌊low_quantile·N⌋` scores strictly above it. Returns the threshold and the
/// number of scores strictly above it.
pub fn initial_threshold(scores: &[f64], low_quantile: f64) -> Result<(f64, usize)> {
    if scores.is_empty() {
        return Err(invalid("cannot threshold an empty score series"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("score series contains NaN"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // the epsilon keeps products like 0.07 * 100 from flooring to 6
    let k = ((low_quantile * n as f64) + 1e-9).floor() as usize;
    let thr = sorted[n - 1 - k.min(n - 1)];
    let n_thr = sorted.iter().filter(|&&s| s > thr).count();
    Ok((thr, n_thr))
}

/// GPD log-likelihood of positive excesses.
pub fn gpd_log_likelihood(excesses: &[f64], gamma: f64, beta: f64) -> f64 {
    if beta <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let n = excesses.len() as f64;
    if gamma.abs() <= 1e-12 {
        return -n * beta.ln() - excesses.iter().sum::<f64>() / beta;
    }
    let mut acc = 0.0;
    for &y in excesses {
        let z = 1.0 + gamma * y / beta;
        if z <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += z.ln();
    }
    -n * beta.ln() - (1.0 + 1.0 / gamma) * acc
}

/// Profile likelihood at Grimshaw's substitution `x = γ/β`.
fn profile(excesses: &[f64], x: f64) -> Option<(f64, f64, f64)> {
    let mut acc = 0.0;
    for &y in excesses {
        let t = x * y;
        if t <= -1.0 {
            return None;
        }
        acc += t.ln_1p();
    }
    let gamma = acc / excesses.len() as f64;
    if gamma == 0.0 {
        return None;
    }
    let beta = gamma / x;
    if !(beta > 0.0 && beta.is_finite()) {
        return None;
    }
    let ll = -(excesses.len() as f64) * (beta.ln() + gamma + 1.0);
    Some((ll, gamma, beta))
}

const GRID_PER_SIDE: usize = 500;

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if (b - a).abs() <= 1e-12 * (a.abs() + b.abs()) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Maximum-likelihood `(γ, β)` for positive excesses.
///
/// Candidates are the local maxima of the profile likelihood over a
/// log-spaced grid on both sides of zero (restricted to `γ > -1`, where the
/// estimator is regular), each refined by golden-section search, plus the
/// exponential limit `γ = 0, β = mean`.
pub fn gpd_fit(excesses: &[f64]) -> Result<(f64, f64)> {
    if excesses.is_empty() {
        return Err(DtaadError::NoPeaks);
    }
    if excesses.iter().any(|&y| !(y > 0.0 && y.is_finite())) {
        return Err(invalid("excesses must be positive and finite"));
    }
    let n = excesses.len() as f64;
    let mean = excesses.iter().sum::<f64>() / n;
    let (lo, hi) = excesses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let exp_ll = -n * (mean.ln() + 1.0);
    let mut best = (exp_ll, 0.0, mean);
    if (hi - lo) <= 1e-12 * hi {
        return Ok((0.0, mean));
    }

    let ll_at = |x: f64| match profile(excesses, x) {
        Some((ll, g, _)) if g > -1.0 => ll,
        _ => f64::NEG_INFINITY,
    };
    let steps = (GRID_PER_SIDE - 1) as f64;
    let negative: Vec<f64> = (0..GRID_PER_SIDE)
        .rev()
        .map(|i| {
            let r = 10f64.powf(-8.0 + 8.0 * i as f64 / steps).min(1.0 - 1e-9);
            -r / hi
        })
        .collect();
    let positive: Vec<f64> = (0..GRID_PER_SIDE)
        .map(|i| 10f64.powf(-6.0 + 12.0 * i as f64 / steps) / mean)
        .collect();
    for side in [negative, positive] {
        let lls: Vec<f64> = side.iter().map(|&x| ll_at(x)).collect();
        for i in 1..side.len() - 1 {
            // both neighbours must be feasible: a point next to the γ = -1
            // cutoff only looks like a maximum because the cutoff is -inf
            let interior = lls[i - 1].is_finite() && lls[i + 1].is_finite();
            if interior && lls[i] >= lls[i - 1] && lls[i] >= lls[i + 1] {
                let x = golden_max(ll_at, side[i - 1], side[i + 1]);
                for cand in [x, side[i]] {
                    if let Some((ll, g, b)) = profile(excesses, cand) {
                        if g > -1.0 && ll > best.0 {
                            best = (ll, g, b);
                        }
                    }
                }
            }
        }
    }
    Ok((best.1, best.2))
}

/// Initial threshold and tail fit of one score series.
pub fn fit_tail(scores: &[f64], cfg: &PotConfig) -> Result<GpdFit> {
    cfg.validate()?;
    let (thr, n_thr) = initial_threshold(scores, cfg.low_quantile)?;
    let excesses: Vec<f64> = scores.iter().filter(|&&s| s > thr).map(|s| s - thr).collect();
    let (gamma, beta) = gpd_fit(&excesses)?;
    Ok(GpdFit {
        gamma,
        beta,
        thr,
        n: scores.len(),
        n_thr,
    })
}

/// `thr + (β/γ)((qN/N_thr)^(-γ) - 1)`, or `thr - β ln(qN/N_thr)` as `γ → 0`,
/// never below `thr`.
pub fn final_threshold(fit: &GpdFit, q: f64) -> f64 {
    if fit.n_thr == 0 {
        return fit.thr;
    }
    let ln_u = (q * fit.n as f64 / fit.n_thr as f64).ln();
    let thr_f = if fit.gamma.abs() > 1e-8 {
        fit.thr + fit.beta / fit.gamma * (-fit.gamma * ln_u).exp_m1()
    } else {
        fit.thr - fit.beta * ln_u
    };
    if thr_f < fit.thr {
        warn!("tail fit puts the final threshold {thr_f} below the initial {}, clamping", fit.thr);
        return fit.thr;
    }
    thr_f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionThreshold {
    pub thr: f64,
    pub gamma: f64,
    pub beta: f64,
    pub n: usize,
    pub n_thr: usize,
    pub thr_final: f64,
    /// Set when there were no peaks and the initial threshold is used as is.
    pub fallback: bool,
}

pub fn threshold_series(scores: &[f64], cfg: &PotConfig) -> Result<DimensionThreshold> {
    cfg.validate()?;
    match fit_tail(scores, cfg) {
        Ok(fit) => Ok(DimensionThreshold {
            thr: fit.thr,
            gamma: fit.gamma,
            beta: fit.beta,
            n: fit.n,
            n_thr: fit.n_thr,
            thr_final: final_threshold(&fit, cfg.q),
            fallback: false,
        }),
        Err(DtaadError::NoPeaks) => {
            let (thr, _) = initial_threshold(scores, cfg.low_quantile)?;
            Ok(DimensionThreshold {
                thr,
                gamma: 0.0,
                beta: 0.0,
                n: scores.len(),
                n_thr: 0,
                thr_final: thr,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Per-dimension thresholds for a `T x m` score matrix.
pub fn calibrate(scores: ArrayView2<'_, f64>, cfg: &PotConfig) -> Result<Vec<DimensionThreshold>> {
    (0..scores.ncols())
        .into_par_iter()
        .map(|j| threshold_series(&scores.column(j).to_vec(), cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub thresholds: Vec<f64>,
    /// `labels[t, j] = score[t, j] >= thresholds[j]`.
    pub labels: Array2<u8>,
    /// Logical OR over dimensions.
    pub aggregate: Vec<u8>,
}

pub fn label_and_aggregate(scores: ArrayView2<'_, f64>, thresholds: &[f64]) -> Result<ThresholdResult> {
    if scores.ncols() != thresholds.len() {
        return Err(invalid(format!(
            "{} score columns but {} thresholds",
            scores.ncols(),
            thresholds.len()
        )));
    }
    let labels = Array2::from_shape_fn(scores.dim(), |(t, j)| u8::from(scores[[t, j]] >= thresholds[j]));
    let aggregate = labels.rows().into_iter().map(|r| u8::from(r.iter().any(|&y| y == 1))).collect();
    Ok(ThresholdResult {
        thresholds: thresholds.to_vec(),
        labels,
        aggregate,
    })
}

/// Streaming variant: starting from the calibration scores, each test score
/// is labeled against the current threshold; non-anomalous scores join the
/// pool and the tail is re-fitted every `refit_every` accepted scores.
pub fn streaming_labels(calibration: &[f64], test: &[f64], cfg: &PotConfig, refit_every: usize) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut pool = calibration.to_vec();
    let mut current = threshold_series(&pool, cfg)?.thr_final;
    let mut labels = Vec::with_capacity(test.len());
    let mut trace = Vec::with_capacity(test.len());
    let mut pending = 0;
    for &s in test {
        let y = u8::from(s >= current);
        labels.push(y);
        trace.push(current);
        if y == 0 {
            pool.push(s);
            pending += 1;
            if pending >= refit_every.max(1) {
                current = threshold_series(&pool, cfg)?.thr_final;
                pending = 0;
            }
        }
    }
    Ok((labels, trace))
}

/// Structured text report of per-dimension thresholds.
pub fn threshold_report(dims: &[DimensionThreshold]) -> Result<String> {
    #[derive(Serialize)]
    struct Report<'a> {
        dimension: &'a [DimensionThreshold],
    }
    toml::to_string(&Report { dimension: dims }).map_err(|e| DtaadError::State(format!("cannot serialize thresholds: {e}")))
}
