//! Classification quality, calibration, rescaler noise detection and the
//! per-epoch weight analyses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Matrix;
use crate::models::argmax_rows;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// One-vs-rest on the positive class.
    pub f1: f64,
    /// One-vs-rest on the positive class; 0 when a marginal is empty.
    pub mcc: f64,
}

/// Accuracy, F1 and Matthews correlation treating `positive` as the
/// positive class.
pub fn classification_metrics(pred: &[usize], labels: &[usize], positive: usize) -> Result<ClassificationMetrics> {
    if pred.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut hits) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        hits += usize::from(p == y);
        match (p == positive, y == positive) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let f1_den = 2.0 * tp + fp + fn_;
    let f1 = if f1_den == 0.0 { 0.0 } else { 2.0 * tp / f1_den };
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc = if factors.contains(&0.0) {
        0.0
    } else {
        (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
    };
    Ok(ClassificationMetrics {
        accuracy: hits as f64 / pred.len() as f64,
        f1,
        mcc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    /// 0 for empty bins.
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

pub const DEFAULT_BINS: usize = 10;

/// Equal-width reliability histogram over `[0, 1]`; confidence 1 falls in the
/// last bin.
pub fn calibration(confidence: &[f64], correct: &[bool], bins: usize) -> Result<Calibration> {
    if confidence.len() != correct.len() {
        return Err(MetricsError::LengthMismatch(confidence.len(), correct.len()));
    }
    if let Some(&p) = confidence.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(MetricsError::Probability(p));
    }
    let bins = bins.max(1);
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &c) in confidence.iter().zip(correct) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        conf_sum[b] += p;
        acc_sum[b] += if c { 1.0 } else { 0.0 };
        count[b] += 1;
    }
    let n = confidence.len() as f64;
    let mut ece = 0.0;
    let out = (0..bins)
        .map(|b| {
            let k = count[b];
            let (mc, ma) = if k == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / k as f64, acc_sum[b] / k as f64)
            };
            if k > 0 {
                ece += k as f64 / n * (mc - ma).abs();
            }
            ReliabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                mean_confidence: mc,
                mean_accuracy: ma,
                count: k,
            }
        })
        .collect();
    Ok(Calibration { bins: out, ece })
}

/// Calibration of argmax predictions from a probability matrix against
/// `labels`.
pub fn calibration_from_probs(probs: &Matrix, labels: &[usize], bins: usize) -> Result<Calibration> {
    if probs.rows() != labels.len() {
        return Err(MetricsError::LengthMismatch(probs.rows(), labels.len()));
    }
    let pred = argmax_rows(probs);
    let conf: Vec<f64> = pred.iter().enumerate().map(|(r, &c)| probs.get(r, c)).collect();
    let correct: Vec<bool> = pred.iter().zip(labels).map(|(p, y)| p == y).collect();
    calibration(&conf, &correct, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Weight threshold at each point after the first: samples with weight
    /// at or below it are flagged noisy.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Noise detection by low weight: a sample is flagged noisy when its weight is
/// at or below the threshold. Tied weights move together, which gives tied
/// pairs half credit. `None` when either class is absent.
pub fn rescaler_roc(weights: &[f64], noise_mask: &[bool]) -> Result<Option<Roc>> {
    if weights.len() != noise_mask.len() {
        return Err(MetricsError::LengthMismatch(weights.len(), noise_mask.len()));
    }
    let pos = noise_mask.iter().filter(|&&m| m).count() as f64;
    let neg = noise_mask.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp, mut auc) = (0.0f64, 0.0f64, 0.0f64);
    let mut k = 0;
    while k < order.len() {
        let t = weights[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && weights[order[k]] == t {
            if noise_mask[order[k]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        auc += (fp - fp0) / neg * (tp + tp0) / (2.0 * pos);
        points.push((fp / neg, tp / pos));
        thresholds.push(t);
    }
    Ok(Some(Roc { points, thresholds, auc }))
}

/// Mean weight of one sample within one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochWeights {
    pub epoch: usize,
    pub ids: Vec<u64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionRow {
    pub epoch: usize,
    pub mean_all: f64,
    /// `None` when the epoch holds no sample of that type or no mask is known.
    pub mean_clean: Option<f64>,
    pub mean_noisy: Option<f64>,
    /// Downscaling cutoff used for this epoch.
    pub threshold: f64,
}

impl ProgressionRow {
    /// `mean_clean − mean_noisy`.
    pub fn gap(&self) -> Option<f64> {
        Some(self.mean_clean? - self.mean_noisy?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterTiming {
    pub id: u64,
    pub noisy: Option<bool>,
    pub earliest: Option<usize>,
    pub latest: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAnalysis {
    pub progression: Vec<ProgressionRow>,
    /// Sorted by id.
    pub timing: Vec<FilterTiming>,
}

/// Downscaling cutoff as a multiple of the epoch's mean weight.
pub const DOWNSCALE_FRACTION: f64 = 0.5;

/// Per-epoch clean/noisy mean weights and, per sample, the first and last
/// epoch in which its weight fell below `fraction` times the epoch mean.
pub fn weight_analyses(epochs: &[EpochWeights], noise: Option<&BTreeMap<u64, bool>>, fraction: f64) -> WeightAnalysis {
    let mut progression = Vec::with_capacity(epochs.len());
    let mut timing: BTreeMap<u64, FilterTiming> = BTreeMap::new();
    for e in epochs {
        let mean = |sel: &dyn Fn(u64) -> bool| -> Option<f64> {
            let v: Vec<f64> = e
                .ids
                .iter()
                .zip(&e.weights)
                .filter(|(id, _)| sel(**id))
                .map(|(_, &w)| w)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mean_all = mean(&|_| true).unwrap_or(0.0);
        let threshold = fraction * mean_all;
        let (mean_clean, mean_noisy) = match noise {
            Some(m) => (
                mean(&|id| m.get(&id) == Some(&false)),
                mean(&|id| m.get(&id) == Some(&true)),
            ),
            None => (None, None),
        };
        progression.push(ProgressionRow {
            epoch: e.epoch,
            mean_all,
            mean_clean,
            mean_noisy,
            threshold,
        });
        for (&id, &w) in e.ids.iter().zip(&e.weights) {
            let t = timing.entry(id).or_insert_with(|| FilterTiming {
                id,
                noisy: noise.and_then(|m| m.get(&id).copied()),
                earliest: None,
                latest: None,
            });
            if w < threshold {
                t.earliest = Some(t.earliest.map_or(e.epoch, |x| x.min(e.epoch)));
                t.latest = Some(t.latest.map_or(e.epoch, |x| x.max(e.epoch)));
            }
        }
    }
    WeightAnalysis {
        progression,
        timing: timing.into_values().collect(),
    }
}
