use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitScheme {
    Fractions { train: f64, val: f64, test: f64 },
    TwoFold,
}

/// Row positions of each part. `test` is empty for two-fold folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Shuffled partition of `0..labels.len()`. Fractions give one split with
/// `val = round(f_val·N)`, `test = round(f_test·N)` and the rest in train;
/// two-fold gives two splits whose `train`/`val` halves swap roles.
pub fn make_splits<R: Rng + ?Sized>(labels: &[usize], scheme: SplitScheme, rng: &mut R) -> Result<Vec<Split>> {
    let n = labels.len();
    let parts = match scheme {
        SplitScheme::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(DataError::Split(format!("fractions {train}/{val}/{test} must lie in [0, 1] and sum to 1")));
            }
            let n_val = (val * n as f64).round() as usize;
            let n_test = (test * n as f64).round() as usize;
            if n_val + n_test > n {
                return Err(DataError::Split("fractions exceed the dataset".into()));
            }
            let n_train = n - n_val - n_test;
            for (name, f, size) in [("train", train, n_train), ("val", val, n_val), ("test", test, n_test)] {
                if f > 0.0 && size == 0 {
                    return Err(DataError::Split(format!("{name} split is empty")));
                }
            }
            let idx = shuffled(n, rng);
            vec![Split {
                train: idx[..n_train].to_vec(),
                val: idx[n_train..n_train + n_val].to_vec(),
                test: idx[n_train + n_val..].to_vec(),
            }]
        }
        SplitScheme::TwoFold => {
            let (a, b) = two_fold(n, rng)?;
            vec![
                Split {
                    train: a.clone(),
                    val: b.clone(),
                    test: Vec::new(),
                },
                Split {
                    train: b,
                    val: a,
                    test: Vec::new(),
                },
            ]
        }
    };
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for (k, s) in parts.iter().enumerate() {
        for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            if part.is_empty() {
                continue;
            }
            let mut seen = vec![false; classes];
            part.iter().for_each(|&i| seen[labels[i]] = true);
            if seen.iter().any(|s| !s) {
                log::warn!("split {k}: {name} part does not contain every class");
            }
        }
    }
    Ok(parts)
}

/// Two disjoint halves covering `0..n`, sizes `n/2` and `n - n/2`.
pub fn two_fold<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(DataError::Split(format!("two folds need at least 2 samples, got {n}")));
    }
    let idx = shuffled(n, rng);
    let h = n / 2;
    Ok((idx[..h].to_vec(), idx[h..].to_vec()))
}
