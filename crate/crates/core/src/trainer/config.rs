use serde::{Deserialize, Serialize};

use crate::features::{FeatureSet, GroupSource};
use crate::optim::{LrSchedule, OptimizerKind};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Unweighted training.
    None,
    Storm,
    Agra,
}

/// Validation metric used for model selection and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    Accuracy,
    F1 { positive: usize },
    Mcc { positive: usize },
}

pub const MAX_INNER_LOOPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub seed: u64,
    pub inner_loop_count: usize,
    /// Stochastic forward passes per sample for the rescaler features.
    pub passes: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub selection_metric: SelectionMetric,

    pub theta_optimizer: OptimizerKind,
    pub theta_lr: f64,
    /// Step size of the differentiable inner update.
    pub inner_lr: f64,
    pub omega_optimizer: OptimizerKind,
    pub omega_lr: f64,
    pub lr_schedule: LrSchedule,

    pub use_meta_grad: bool,
    pub use_outer_grad: bool,
    /// Off: no unrolled step; the rescaler learns from the outer gradient only.
    pub use_meta_learning: bool,
    /// Weight the validation losses with the rescaler in the meta loss.
    pub rescale_meta_loss: bool,
    /// Draw meta-validation batches from a clean held-out set.
    pub clean_validation_source: bool,
    /// Skip every rescaler update.
    pub freeze_rescaler: bool,
    pub binary_mode: bool,
    pub binary_threshold: f64,
    pub class_separation: bool,
    pub loss_only_features: bool,
    pub group_source: GroupSource,
    /// Class memory capacity; defaults to the batch size.
    pub memory_size: Option<usize>,
    pub rescaler_hidden: usize,
    /// Multiplier on rescaler weights before they touch a loss.
    pub weight_scale: f64,
    /// AGRA keeps samples with similarity ≤ 0 instead of > 0.
    pub agra_keep_nonpositive: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Storm,
            seed: 0,
            inner_loop_count: 1,
            passes: 3,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            selection_metric: SelectionMetric::Accuracy,
            theta_optimizer: OptimizerKind::ADAM,
            theta_lr: 1e-2,
            inner_lr: 10.0,
            omega_optimizer: OptimizerKind::ADAM,
            omega_lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            use_meta_grad: true,
            use_outer_grad: true,
            use_meta_learning: true,
            rescale_meta_loss: true,
            clean_validation_source: false,
            freeze_rescaler: false,
            binary_mode: false,
            binary_threshold: 0.5,
            class_separation: true,
            loss_only_features: false,
            group_source: GroupSource::Memory,
            memory_size: None,
            rescaler_hidden: 32,
            weight_scale: 1.0,
            agra_keep_nonpositive: false,
        }
    }
}

impl TrainerConfig {
    pub fn memory_capacity(&self) -> usize {
        self.memory_size.unwrap_or(self.batch_size)
    }

    pub fn feature_set(&self) -> FeatureSet {
        if self.loss_only_features {
            FeatureSet::LossOnly
        } else {
            FeatureSet::Full
        }
    }

    /// The rescaler receives a gradient from at least one source.
    pub fn learns_rescaler(&self) -> bool {
        !self.freeze_rescaler
            && ((self.use_meta_grad && self.use_meta_learning) || (self.use_outer_grad && self.rescale_meta_loss))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(1..=MAX_INNER_LOOPS).contains(&self.inner_loop_count) {
            return bad(format!("inner_loop_count must be in 1..={MAX_INNER_LOOPS}"));
        }
        if self.passes == 0 {
            return bad("passes must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if self.memory_capacity() == 0 || self.rescaler_hidden == 0 {
            return bad("memory_size and rescaler_hidden must be positive".into());
        }
        for (name, v) in [
            ("theta_lr", self.theta_lr),
            ("inner_lr", self.inner_lr),
            ("omega_lr", self.omega_lr),
            ("weight_scale", self.weight_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        if !(self.binary_threshold > 0.0 && self.binary_threshold < 1.0) {
            return bad("binary_threshold must lie in (0, 1)".into());
        }
        if self.mode == Mode::Storm
            && self.use_meta_learning
            && !self.freeze_rescaler
            && !self.use_meta_grad
            && !self.use_outer_grad
        {
            return bad("storm with meta learning needs use_meta_grad or use_outer_grad".into());
        }
        Ok(())
    }
}
