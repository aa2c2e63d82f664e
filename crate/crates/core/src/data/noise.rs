use rand::seq::index::sample;
use rand::Rng;

use super::{DataError, Result};

/// Flips exactly `round(rate * n)` labels, chosen without replacement, each to
/// a uniformly drawn different class. Returns the new labels and the flip mask.
pub fn inject_uniform_noise<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    rate: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=0.5).contains(&rate) {
        return Err(DataError::NoiseRate(rate));
    }
    if num_classes < 2 {
        return Err(DataError::TooFewClasses(num_classes));
    }
    let n = labels.len();
    let k = (rate * n as f64).round() as usize;
    let mut noisy = labels.to_vec();
    let mut mask = vec![false; n];
    let mut picked = sample(rng, n, k).into_vec();
    picked.sort_unstable();
    for i in picked {
        let r = rng.random_range(0..num_classes - 1);
        noisy[i] = if r >= labels[i] { r + 1 } else { r };
        mask[i] = true;
    }
    Ok((noisy, mask))
}
