//! Accuracy, AUROC, ROC curves and bootstrap standard deviations.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::Rng;

pub const THRESHOLD: f64 = 0.5;
pub const MAX_REDRAWS: usize = 100;

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("scores contain NaN".into()));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Mann-Whitney statistic via midranks: probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let (np, nn) = class_counts(labels);
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (np as f64, nn as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    Ok(preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

pub fn threshold(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|&s| (s >= THRESHOLD) as u8).collect()
}

/// Accuracy of thresholded positive-class scores.
pub fn score_accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    accuracy(&threshold(scores), labels)
}

/// `(fpr, tpr)` at every distinct threshold in descending score order,
/// between `(0, 0)` and `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_pair(scores, labels)?;
    let (np, nn) = class_counts(labels);
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / nn as f64, tp as f64 / np as f64));
    }
    if pts.last() != Some(&(1.0, 1.0)) {
        pts.push((1.0, 1.0));
    }
    Ok(pts)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Auroc,
}

impl Metric {
    pub fn eval(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Accuracy => score_accuracy(scores, labels),
            Metric::Auroc => auroc(scores, labels),
        }
    }
}

fn resample_metric(scores: &[f64], labels: &[u8], metric: Metric, seed: u64, b: usize) -> Result<f64> {
    let n = scores.len();
    let mut rng = Rng::new(seed, b as u64);
    let (mut s, mut l) = (vec![0.0; n], vec![0u8; n]);
    for _ in 0..=MAX_REDRAWS {
        for k in 0..n {
            let i = rng.below(n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        let (np, nn) = class_counts(&l);
        if np > 0 && nn > 0 {
            return metric.eval(&s, &l);
        }
    }
    Err(Error::Degenerate(format!("bootstrap resample {b} stayed single-class after {MAX_REDRAWS} redraws")))
}

/// Sample standard deviation of `metric` over `b` resamples with
/// replacement. Resample `i` draws from its own stream `(seed, i)`; draws
/// holding a single class are redrawn.
pub fn bootstrap_std(scores: &[f64], labels: &[u8], metric: Metric, b: usize, seed: u64) -> Result<f64> {
    check_pair(scores, labels)?;
    if b < 2 {
        return Err(Error::Precondition(format!("bootstrap needs B ≥ 2, got {b}")));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("bootstrap over an empty set".into()));
    }
    let vals: Vec<f64> =
        (0..b).into_par_iter().map(|i| resample_metric(scores, labels, metric, seed, i)).collect::<Result<_>>()?;
    let mean = vals.iter().sum::<f64>() / b as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { n_bootstrap: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub auroc: f64,
    pub auroc_std: f64,
    pub roc_points: Vec<(f64, f64)>,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], cfg: &MetricsConfig) -> Result<Self> {
        Ok(MetricsReport {
            accuracy: score_accuracy(scores, labels)?,
            accuracy_std: bootstrap_std(scores, labels, Metric::Accuracy, cfg.n_bootstrap, cfg.seed)?,
            auroc: auroc(scores, labels)?,
            auroc_std: bootstrap_std(scores, labels, Metric::Auroc, cfg.n_bootstrap, cfg.seed)?,
            roc_points: roc_curve(scores, labels)?,
            n_bootstrap: cfg.n_bootstrap,
            seed: cfg.seed,
        })
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc_points {
            let _ = writeln!(s, "{f:.6},{t:.6}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mp = dir.join("metrics.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(&mp, e))?;
        std::fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
        let rp = dir.join("roc.csv");
        std::fs::write(&rp, self.roc_csv()).map_err(|e| Error::io(&rp, e))
    }
}
