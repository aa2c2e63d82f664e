//! SGD and Adam over lists of parameter matrices.

use serde::{Deserialize, Serialize};

use crate::graph::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: Self = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Ramps linearly from `lr / steps` to `lr` over the first `steps` updates.
    LinearWarmup { steps: u64 },
}

impl LrSchedule {
    /// Learning rate for 1-based update number `t`.
    pub fn rate(self, lr: f64, t: u64) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::LinearWarmup { steps } if steps > 0 && t < steps => lr * t as f64 / steps as f64,
            LrSchedule::LinearWarmup { .. } => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, schedule: LrSchedule) -> Self {
        Self {
            kind,
            lr,
            schedule,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Rate the next call to [`step`](Self::step) will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.rate(self.lr, self.step + 1)
    }

    /// In-place update of `params` from `grads` (same shapes, same order).
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
        self.step += 1;
        let lr = self.schedule.rate(self.lr, self.step);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-lr, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.m[k].as_mut_slice();
                    let v = self.v[k].as_mut_slice();
                    for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *pi -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
