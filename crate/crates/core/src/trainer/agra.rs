//! Gradient-agreement filtering over the final linear layer.
//!
//! For cross-entropy on a linear layer `z = h W + b`, the per-sample gradient
//! is `(h ⊗ e, e)` with `e = softmax(z) − onehot(y)`, so every inner product
//! needed for the cosine similarity has a closed form.

use crate::graph::Matrix;

/// `e = p − onehot(labels)`.
pub fn output_errors(probs: &Matrix, labels: &[usize]) -> Matrix {
    let mut e = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let v = e.get(r, y);
        e.set(r, y, v - 1.0);
    }
    e
}

/// Mean gradient `(Σ h_jᵀ e_j / n, Σ e_j / n)` over a batch.
pub fn mean_gradient(h: &Matrix, e: &Matrix) -> (Matrix, Matrix) {
    let n = h.rows() as f64;
    let gw = h.transpose().matmul(e).map(|v| v / n);
    let mut gb = Matrix::zeros(1, e.cols());
    for r in 0..e.rows() {
        for (acc, &v) in gb.as_mut_slice().iter_mut().zip(e.row(r)) {
            *acc += v / n;
        }
    }
    (gw, gb)
}

/// Cosine similarity between each sample's gradient and the comparison
/// gradient `(gw, gb)`; 0 where either norm vanishes.
pub fn similarities(h: &Matrix, e: &Matrix, gw: &Matrix, gb: &Matrix) -> Vec<f64> {
    let comp_norm = (gw.dot(gw) + gb.dot(gb)).sqrt();
    let proj = h.matmul(gw);
    (0..h.rows())
        .map(|i| {
            let ei = e.row(i);
            let hi = h.row(i);
            let dot: f64 = proj.row(i).iter().zip(ei).map(|(a, b)| a * b).sum::<f64>()
                + gb.as_slice().iter().zip(ei).map(|(a, b)| a * b).sum::<f64>();
            let e2: f64 = ei.iter().map(|v| v * v).sum();
            let h2: f64 = hi.iter().map(|v| v * v).sum();
            let own = (e2 * h2 + e2).sqrt();
            if own == 0.0 || comp_norm == 0.0 {
                0.0
            } else {
                (dot / (own * comp_norm)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}
