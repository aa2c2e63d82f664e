use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Provenance};
use crate::models::{Features, SampleRecord};

/// Isotropic unit-variance Gaussian blobs, one per class. Class `c` is centred
/// at `separation / sqrt(2)` along axis `c`, so every pair of centres is
/// `separation` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub separation: f64,
    /// Share of samples in class 0; the remaining classes split the rest
    /// evenly. `None` means balanced.
    pub majority_share: Option<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            dim: 2,
            num_classes: 2,
            separation: 3.0,
            majority_share: None,
        }
    }
}

impl SyntheticConfig {
    fn class_counts(&self) -> Vec<usize> {
        let c = self.num_classes;
        let n = self.samples;
        let mut counts = match self.majority_share {
            None => vec![n / c; c],
            Some(share) => {
                let first = (share * n as f64).round() as usize;
                let mut v = vec![(n - first) / (c - 1); c];
                v[0] = first;
                v
            }
        };
        // remainder goes to the trailing classes, one each
        let mut k = c;
        while counts.iter().sum::<usize>() < n {
            k = if k == 0 { c - 1 } else { k - 1 };
            counts[k] += 1;
        }
        counts
    }
}

/// Draws `config.samples` labelled points, shuffled; ids are positions.
pub fn generate_synthetic<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<Dataset, DataError> {
    let c = config.num_classes;
    if c < 2 {
        return Err(DataError::TooFewClasses(c));
    }
    if config.dim < c {
        return Err(DataError::Synthetic(format!("dim {} must be at least the class count {c}", config.dim)));
    }
    if config.samples < c {
        return Err(DataError::Synthetic("fewer samples than classes".into()));
    }
    if !config.separation.is_finite() || config.separation < 0.0 {
        return Err(DataError::Synthetic(format!("separation {}", config.separation)));
    }
    if let Some(s) = config.majority_share {
        if !(s > 0.0 && s < 1.0) {
            return Err(DataError::Synthetic(format!("majority_share {s} outside (0, 1)")));
        }
    }
    let mut labels: Vec<usize> = config
        .class_counts()
        .iter()
        .enumerate()
        .flat_map(|(k, &m)| std::iter::repeat_n(k, m))
        .collect();
    labels.shuffle(rng);
    let offset = config.separation / std::f64::consts::SQRT_2;
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut x: Vec<f64> = (0..config.dim).map(|_| rng.sample(StandardNormal)).collect();
            x[y] += offset;
            SampleRecord {
                id: i as u64,
                features: Features::Dense(x),
                noisy_label: y,
                clean_label: Some(y),
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: c,
        class_names: (0..c).map(|k| format!("class{k}")).collect(),
        vocabulary: None,
        noise_mask: None,
        provenance: Provenance {
            source: "synthetic".into(),
            digest: format!(
                "n={} d={} c={} sep={} share={:?}",
                config.samples, config.dim, c, config.separation, config.majority_share
            ),
        },
    })
}
