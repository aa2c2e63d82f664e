//! Rescaler input features.
//!
//! Each sample is summarised over `G` dropout forward passes (mean/std of its
//! loss and of the probability given to its label), the summary is pushed into
//! a bounded per-class memory, and the 19-entry feature vector compares the
//! sample against the group statistics of that memory.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::graph::Matrix;
use crate::models::{argmax_rows, Batch, ClassifierModel, ModelError, PROB_FLOOR};
use crate::rng::StreamRng;

/// Lower clamp applied to standard deviations inside `kl_normal`/`ovl_normal`.
pub const STD_FLOOR: f64 = 1e-6;
/// Length of the full feature vector.
pub const FEATURE_DIM: usize = 19;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("number of forward passes must be at least 1")]
    NoPasses,
    #[error("class memory for class {0} is empty")]
    EmptyMemory(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Per-sample summary of the `G` stochastic passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub loss_mean: f64,
    pub loss_std: f64,
    pub prob_mean: f64,
    pub prob_std: f64,
    pub predicted: usize,
    pub label: usize,
}

/// Running mean and population standard deviation (Welford), exact for
/// constant input.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2.max(0.0) / self.n as f64).sqrt()
        }
    }

    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut m = Self::default();
        for v in values {
            m.push(v);
        }
        m
    }
}

/// Runs `passes` dropout forward passes plus one dropout-free pass (for the
/// predicted class) without building a gradient graph.
pub fn stochastic_passes(
    model: &ClassifierModel,
    theta: &[Matrix],
    batch: &Batch,
    passes: usize,
    rng: &mut StreamRng,
) -> Result<Vec<SampleStats>> {
    if passes == 0 {
        return Err(FeatureError::NoPasses);
    }
    let n = batch.len();
    let mut losses = vec![Moments::default(); n];
    let mut probs = vec![Moments::default(); n];
    for _ in 0..passes {
        let p = model.forward_with(theta, &batch.x, Some(&mut *rng))?;
        for (i, &label) in batch.labels.iter().enumerate() {
            let pi = p.get(i, label);
            losses[i].push(-pi.max(PROB_FLOOR).ln());
            probs[i].push(pi);
        }
    }
    let predicted = argmax_rows(&model.forward_with(theta, &batch.x, None)?);
    Ok((0..n)
        .map(|i| SampleStats {
            loss_mean: losses[i].mean(),
            loss_std: losses[i].std(),
            prob_mean: probs[i].mean(),
            prob_std: probs[i].std(),
            predicted: predicted[i],
            label: batch.labels[i],
        })
        .collect())
}

/// KL divergence `D(N(m1, s1) || N(m2, s2))` with both stds clamped to
/// [`STD_FLOOR`].
pub fn kl_normal(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let s1 = s1.max(STD_FLOOR);
    let s2 = s2.max(STD_FLOOR);
    let d = m1 - m2;
    let kl = (s2 / s1).ln() + (s1 * s1 + d * d) / (2.0 * s2 * s2) - 0.5;
    kl.max(0.0)
}

fn log_density(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    -s.ln() - 0.5 * z * z
}

/// Probability mass of `N(m, s)` on `(a, b)`, using the upper tail when the
/// interval lies right of the mean.
fn normal_mass(a: f64, b: f64, m: f64, s: f64) -> f64 {
    let za = (a - m) / s;
    let zb = (b - m) / s;
    let upper = |z: f64| 0.5 * erfc(z / std::f64::consts::SQRT_2);
    if za > 0.0 {
        (upper(za) - upper(zb)).max(0.0)
    } else {
        (upper(-zb) - upper(-za)).max(0.0)
    }
}

/// Points where the two densities are equal, ascending.
fn crossings(m1: f64, s1: f64, m2: f64, s2: f64) -> Vec<f64> {
    let (v1, v2) = (s1 * s1, s2 * s2);
    let b = m2 / v2 - m1 / v1;
    let c = m1 * m1 / (2.0 * v1) - m2 * m2 / (2.0 * v2) + (s1 / s2).ln();
    if (s1 - s2).abs() <= 1e-12 {
        if b == 0.0 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let a = 1.0 / (2.0 * v1) - 1.0 / (2.0 * v2);
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = if q == 0.0 {
        vec![0.0]
    } else {
        vec![q / a, c / q]
    };
    roots.retain(|r| r.is_finite());
    roots.sort_by(f64::total_cmp);
    roots.dedup();
    roots
}

/// Overlap coefficient `∫ min(f1, f2)` of two normals, computed from the
/// density crossing points and normal CDF masses.
pub fn ovl_normal(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let s1 = s1.max(STD_FLOOR);
    let s2 = s2.max(STD_FLOOR);
    if m1 == m2 && s1 == s2 {
        return 1.0;
    }
    let cuts = crossings(m1, s1, m2, s2);
    if cuts.is_empty() {
        return 1.0;
    }
    let spread = s1.max(s2);
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(f64::NEG_INFINITY);
    edges.extend_from_slice(&cuts);
    edges.push(f64::INFINITY);
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let probe = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - spread,
            (true, false) => lo + spread,
            (false, false) => unreachable!("at least one crossing"),
        };
        total += if log_density(probe, m1, s1) <= log_density(probe, m2, s2) {
            normal_mass(lo, hi, m1, s1)
        } else {
            normal_mass(lo, hi, m2, s2)
        };
    }
    total.clamp(0.0, 1.0)
}

/// Bounded store of recent [`SampleStats`]; pushing past capacity evicts the
/// oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMemory {
    capacity: usize,
    entries: VecDeque<SampleStats>,
}

impl ClassMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, stats: SampleStats) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(stats);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &SampleStats> + Clone {
        self.entries.iter()
    }
}

/// Group-level statistics over a population of [`SampleStats`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    /// mean and std of the per-sample loss means
    pub loss_mean: (f64, f64),
    /// mean and std of the per-sample loss stds
    pub loss_std: (f64, f64),
    pub prob_mean: (f64, f64),
    pub prob_std: (f64, f64),
    pub kl: (f64, f64),
    pub ovl: (f64, f64),
}

impl GroupStats {
    /// A single entry yields zero stds and means equal to that entry.
    pub fn from_entries<'a>(entries: impl Iterator<Item = &'a SampleStats> + Clone) -> Option<Self> {
        let pair = |m: Moments| (m.mean(), m.std());
        let lm = Moments::of(entries.clone().map(|e| e.loss_mean));
        if lm.n == 0 {
            return None;
        }
        let ls = Moments::of(entries.clone().map(|e| e.loss_std));
        let pm = Moments::of(entries.clone().map(|e| e.prob_mean));
        let ps = Moments::of(entries.clone().map(|e| e.prob_std));
        let (gm, gs) = (lm.mean(), ls.mean());
        let kl = Moments::of(entries.clone().map(|e| kl_normal(e.loss_mean, e.loss_std, gm, gs)));
        let ovl = Moments::of(entries.map(|e| ovl_normal(e.loss_mean, e.loss_std, gm, gs)));
        Some(Self {
            loss_mean: pair(lm),
            loss_std: pair(ls),
            prob_mean: pair(pm),
            prob_std: pair(ps),
            kl: pair(kl),
            ovl: pair(ovl),
        })
    }
}

/// The 19 features in fixed order:
/// loss mean (sample, group mean, group mean of stds),
/// loss std (sample, group std of means, group std of stds),
/// the same six for the label probability, then KL and OVL (sample, group
/// mean, group std) and the prediction/label agreement flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn from_group(s: &SampleStats, g: &GroupStats) -> Self {
        let kl = kl_normal(s.loss_mean, s.loss_std, g.loss_mean.0, g.loss_std.0);
        let ovl = ovl_normal(s.loss_mean, s.loss_std, g.loss_mean.0, g.loss_std.0);
        Self([
            s.loss_mean,
            g.loss_mean.0,
            g.loss_std.0,
            s.loss_std,
            g.loss_mean.1,
            g.loss_std.1,
            s.prob_mean,
            g.prob_mean.0,
            g.prob_std.0,
            s.prob_std,
            g.prob_mean.1,
            g.prob_std.1,
            kl,
            g.kl.0,
            g.kl.1,
            ovl,
            g.ovl.0,
            g.ovl.1,
            if s.predicted == s.label { 1.0 } else { 0.0 },
        ])
    }

    pub fn kl(&self) -> f64 {
        self.0[12]
    }

    pub fn ovl(&self) -> f64 {
        self.0[15]
    }

    pub fn cat(&self) -> f64 {
        self.0[18]
    }
}

/// Features of `stats` against the population held in `memory`.
pub fn compute_features(stats: &SampleStats, memory: &ClassMemory) -> Result<FeatureVector> {
    let group = GroupStats::from_entries(memory.iter()).ok_or(FeatureError::EmptyMemory(stats.label))?;
    Ok(FeatureVector::from_group(stats, &group))
}

/// Which population supplies the group statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupSource {
    /// The per-class memory, after inserting the current batch.
    Memory,
    /// The current batch's samples of the same class only.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSet {
    Full,
    /// Only the sample's mean loss.
    LossOnly,
}

impl FeatureSet {
    pub fn dim(self) -> usize {
        match self {
            FeatureSet::Full => FEATURE_DIM,
            FeatureSet::LossOnly => 1,
        }
    }
}

/// Owns the class memories and turns batch statistics into rescaler inputs.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    memories: Vec<ClassMemory>,
    class_separation: bool,
    group_source: GroupSource,
    feature_set: FeatureSet,
}

impl FeatureExtractor {
    pub fn new(
        num_classes: usize,
        capacity: usize,
        class_separation: bool,
        group_source: GroupSource,
        feature_set: FeatureSet,
    ) -> Self {
        let groups = if class_separation { num_classes } else { 1 };
        Self {
            memories: (0..groups).map(|_| ClassMemory::new(capacity)).collect(),
            class_separation,
            group_source,
            feature_set,
        }
    }

    /// Memory / rescaler index used for samples carrying `label`.
    pub fn group_of(&self, label: usize) -> usize {
        if self.class_separation {
            label
        } else {
            0
        }
    }

    pub fn num_groups(&self) -> usize {
        self.memories.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_set.dim()
    }

    pub fn memory(&self, group: usize) -> &ClassMemory {
        &self.memories[group]
    }

    /// Inserts the batch into the memories, then featurises it.
    pub fn observe(&mut self, stats: &[SampleStats]) -> Result<Matrix> {
        for s in stats {
            let gi = self.group_of(s.label);
            self.memories[gi].push(*s);
        }
        self.featurize(stats)
    }

    /// Featurises without touching the memories.
    pub fn featurize(&self, stats: &[SampleStats]) -> Result<Matrix> {
        let dim = self.feature_dim();
        let mut out = Matrix::zeros(stats.len(), dim);
        let groups: Vec<Option<GroupStats>> = match (self.feature_set, self.group_source) {
            (FeatureSet::LossOnly, _) => vec![None; self.num_groups()],
            (FeatureSet::Full, GroupSource::Memory) => self
                .memories
                .iter()
                .map(|m| GroupStats::from_entries(m.iter()))
                .collect(),
            (FeatureSet::Full, GroupSource::Batch) => (0..self.num_groups())
                .map(|gi| GroupStats::from_entries(stats.iter().filter(|s| self.group_of(s.label) == gi)))
                .collect(),
        };
        for (r, s) in stats.iter().enumerate() {
            match self.feature_set {
                FeatureSet::LossOnly => out.set(r, 0, s.loss_mean),
                FeatureSet::Full => {
                    let gi = self.group_of(s.label);
                    let group = groups[gi].as_ref().ok_or(FeatureError::EmptyMemory(s.label))?;
                    out.row_mut(r).copy_from_slice(&FeatureVector::from_group(s, group).0);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
