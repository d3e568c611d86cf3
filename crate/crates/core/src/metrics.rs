//! Detection and diagnosis metrics.

use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DtaadError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Point-wise precision, recall and F1; zero denominators yield 0.
pub fn precision_recall_f1(pred: &[u8], truth: &[u8]) -> Result<(f64, f64, f64, ConfusionCounts)> {
    if pred.len() != truth.len() {
        return Err(invalid(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1, c))
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted 0.5.
pub fn roc_auc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(invalid(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let pos = truth.iter().filter(|&&t| t != 0).count() as u64;
    let neg = truth.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(DtaadError::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of winning pairs, so ties stay integral
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let p = group.iter().filter(|&&k| truth[k] != 0).count() as u128;
        let n = group.len() as u128 - p;
        doubled += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(doubled as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Dimension indices by descending score; ties keep the lower index first.
pub fn rank_dimensions(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    order
}

/// `⌊g·p/100⌋`.
pub fn cutoff(g: usize, p: f64) -> usize {
    (g as f64 * p / 100.0 + 1e-9).floor() as usize
}

fn diagnosis<F>(scores: ArrayView2<'_, f64>, truth: ArrayView2<'_, u8>, p: f64, per_row: F) -> Result<f64>
where
    F: Fn(&[usize], &[bool], usize, usize) -> f64,
{
    if scores.dim() != truth.dim() {
        return Err(invalid(format!(
            "score matrix {:?} and truth {:?} differ in shape",
            scores.dim(),
            truth.dim()
        )));
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(invalid(format!("percentage {p} must be positive")));
    }
    let (mut total, mut rows) = (0.0, 0usize);
    for (s, t) in scores.rows().into_iter().zip(truth.rows()) {
        let relevant: Vec<bool> = t.iter().map(|&y| y != 0).collect();
        let g = relevant.iter().filter(|&&r| r).count();
        if g == 0 {
            continue;
        }
        let ranked = rank_dimensions(&s.to_vec());
        let k = cutoff(g, p).min(ranked.len());
        total += per_row(&ranked, &relevant, g, k);
        rows += 1;
    }
    if rows == 0 {
        return Err(DtaadError::UndefinedMetric("no timestamp has anomalous dimensions".into()));
    }
    Ok(total / rows as f64)
}

/// Mean fraction of true dimensions found in the top `⌊g·p/100⌋`.
pub fn hitrate_at_p(scores: ArrayView2<'_, f64>, truth: ArrayView2<'_, u8>, p: f64) -> Result<f64> {
    diagnosis(scores, truth, p, |ranked, rel, g, k| {
        ranked[..k].iter().filter(|&&d| rel[d]).count() as f64 / g as f64
    })
}

/// Binary-relevance NDCG over the top `⌊g·p/100⌋`.
pub fn ndcg_at_p(scores: ArrayView2<'_, f64>, truth: ArrayView2<'_, u8>, p: f64) -> Result<f64> {
    diagnosis(scores, truth, p, |ranked, rel, g, k| {
        let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
        let dcg: f64 = ranked[..k].iter().enumerate().filter(|(_, &d)| rel[d]).map(|(i, _)| gain(i)).sum();
        let idcg: f64 = (0..g.min(k)).map(gain).sum();
        if idcg == 0.0 {
            0.0
        } else {
            dcg / idcg
        }
    })
}

/// Marks a whole true anomaly segment as detected when any point in it is.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(invalid(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut out = pred.to_vec();
    let mut i = 0;
    while i < truth.len() {
        if truth[i] == 0 {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < truth.len() && truth[j] != 0 {
            j += 1;
        }
        if pred[i..j].iter().any(|&p| p != 0) {
            out[i..j].fill(1);
        }
        i = j;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    /// `(p, value)` pairs.
    pub hitrate: Vec<(f64, f64)>,
    pub ndcg: Vec<(f64, f64)>,
    pub counts: ConfusionCounts,
    pub runtime_seconds: Option<f64>,
}

/// Keys always present in a serialized report.
pub const REPORT_KEYS: [&str; 8] = [
    "precision",
    "recall",
    "f1",
    "auc",
    "hitrate@100",
    "hitrate@150",
    "ndcg@100",
    "ndcg@150",
];

fn percent_key(prefix: &str, p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{prefix}@{}", p as i64)
    } else {
        format!("{prefix}@{p}")
    }
}

impl MetricsReport {
    /// Serializes to TOML. Diagnosis metrics that could not be computed are
    /// written as NaN so the key set stays fixed.
    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::new();
        t.insert("precision".into(), self.precision.into());
        t.insert("recall".into(), self.recall.into());
        t.insert("f1".into(), self.f1.into());
        t.insert("auc".into(), self.auc.into());
        for p in [100.0, 150.0] {
            t.insert(percent_key("hitrate", p), f64::NAN.into());
            t.insert(percent_key("ndcg", p), f64::NAN.into());
        }
        for &(p, v) in &self.hitrate {
            t.insert(percent_key("hitrate", p), v.into());
        }
        for &(p, v) in &self.ndcg {
            t.insert(percent_key("ndcg", p), v.into());
        }
        for (k, v) in [
            ("tp", self.counts.tp),
            ("fp", self.counts.fp),
            ("fn", self.counts.fn_),
            ("tn", self.counts.tn),
        ] {
            t.insert(k.into(), (v as i64).into());
        }
        if let Some(r) = self.runtime_seconds {
            t.insert("runtime_seconds".into(), r.into());
        }
        t.to_string()
    }
}

/// Detection metrics on entity labels; AUC uses the mean score across
/// dimensions. Diagnosis metrics are added when per-dimension truth is given.
pub fn evaluate(
    scores: ArrayView2<'_, f64>,
    pred: &[u8],
    truth: &[u8],
    dim_truth: Option<ArrayView2<'_, u8>>,
    percents: &[f64],
    adjust: bool,
) -> Result<MetricsReport> {
    if scores.nrows() != truth.len() {
        return Err(DtaadError::Shape(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            truth.len()
        )));
    }
    let pred = if adjust { point_adjust(pred, truth)? } else { pred.to_vec() };
    let (precision, recall, f1, counts) = precision_recall_f1(&pred, truth)?;
    let mean: Vec<f64> = scores.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect();
    let auc = roc_auc(&mean, truth)?;
    let (mut hitrate, mut ndcg) = (Vec::new(), Vec::new());
    if let Some(dt) = dim_truth {
        for &p in percents {
            hitrate.push((p, hitrate_at_p(scores, dt, p)?));
            ndcg.push((p, ndcg_at_p(scores, dt, p)?));
        }
    }
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        auc,
        hitrate,
        ndcg,
        counts,
        runtime_seconds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn prf_examples() {
        let (p, r, f1, c) = precision_recall_f1(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12 && r == 1.0 && (f1 - 0.8).abs() < 1e-12);
        assert_eq!(c.total(), 4);
        assert_eq!(precision_recall_f1(&[1, 0, 1], &[1, 0, 1]).unwrap().2, 1.0);
        let (p, r, f1, _) = precision_recall_f1(&[0, 0, 0], &[0, 1, 1]).unwrap();
        assert_eq!((p, r, f1), (0.0, 0.0, 0.0));
        assert!(precision_recall_f1(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(DtaadError::UndefinedMetric(_))));
    }

    #[test]
    fn hitrate_examples() {
        let s = array![[0.9, 0.2, 0.8, 0.1, 0.5]];
        assert_eq!(hitrate_at_p(s.view(), array![[1u8, 0, 1, 0, 0]].view(), 100.0).unwrap(), 1.0);
        let t = array![[1u8, 0, 0, 0, 1]];
        assert_eq!(hitrate_at_p(s.view(), t.view(), 100.0).unwrap(), 0.5);
        assert_eq!(hitrate_at_p(s.view(), t.view(), 150.0).unwrap(), 1.0);
        let all = array![[1u8; 5]];
        assert_eq!(hitrate_at_p(s.view(), all.view(), 100.0).unwrap(), 1.0);
    }

    #[test]
    fn ndcg_example() {
        // ranks 1..3 hold dims 0, 1, 2 with relevance (1, 0, 1); g = 2, p = 150
        let s = array![[0.9, 0.8, 0.7, 0.1]];
        let t = array![[1u8, 0, 1, 0]];
        let v = ndcg_at_p(s.view(), t.view(), 150.0).unwrap();
        assert!((v - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((v - 0.9198).abs() < 1e-4);
        let ideal = array![[0.9, 0.1, 0.8, 0.0]];
        assert_eq!(ndcg_at_p(ideal.view(), t.view(), 100.0).unwrap(), 1.0);
        let miss = array![[0.0, 0.9, 0.0, 0.8]];
        assert_eq!(ndcg_at_p(miss.view(), t.view(), 100.0).unwrap(), 0.0);
    }

    #[test]
    fn rows_without_truth_are_skipped() {
        let s = array![[0.9, 0.1], [0.1, 0.9]];
        let t = array![[0u8, 0], [0, 1]];
        assert_eq!(hitrate_at_p(s.view(), t.view(), 100.0).unwrap(), 1.0);
        let none = array![[0u8, 0], [0, 0]];
        assert!(hitrate_at_p(s.view(), none.view(), 100.0).is_err());
    }

    #[test]
    fn point_adjust_fills_segments() {
        let truth = [0, 1, 1, 1, 0, 1, 1];
        let pred = [0, 0, 1, 0, 0, 0, 0];
        assert_eq!(point_adjust(&pred, &truth).unwrap(), vec![0, 1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn perfect_report_and_keys() {
        let scores = array![[0.0, 0.1], [1.0, 0.9], [0.05, 0.0]];
        let truth = [0, 1, 0];
        let dims = array![[0u8, 0], [1, 1], [0, 0]];
        let r = evaluate(scores.view(), &truth, &truth, Some(dims.view()), &[100.0, 150.0], false).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.auc), (1.0, 1.0, 1.0, 1.0));
        assert!(r.hitrate.iter().chain(&r.ndcg).all(|&(_, v)| v == 1.0));
        let text = r.to_toml();
        let parsed: toml::Table = text.parse().unwrap();
        for key in REPORT_KEYS {
            assert!(parsed.contains_key(key), "{key} missing from\n{text}");
        }
    }
}
