//! Joint training of the classifier and its loss rescaler.
//!
//! One training step under [`Mode::Storm`] is `inner_loop_count` inner
//! traversals followed by one outer update:
//!
//! * inner: featurise the batch, weight its per-sample losses with the
//!   rescaler, take the gradient of the weighted mean loss with the graph
//!   retained, and form the unrolled parameters `θ* = θ − η·∇θ`. The real
//!   parameters are updated by the configured optimizer from the same gradient
//!   values.
//! * outer: draw a validation batch, evaluate it at `θ*`, and update the
//!   rescaler from the gradient through the unrolled step (with the validation
//!   weights held fixed) plus the direct gradient through the validation
//!   weights (with the validation losses held fixed).

pub mod agra;
mod config;
mod log;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub use config::{Mode, SelectionMetric, TrainerConfig, MAX_INNER_LOOPS};
pub use log::{EpochRecord, LogRecord, RunLog, StepRecord};

use crate::features::{stochastic_passes, FeatureError, FeatureExtractor, SampleStats};
use crate::graph::{Graph, GraphError, Matrix, NodeId};
use crate::metrics::classification_metrics;
use crate::models::{per_sample_loss, Batch, ClassifierModel, LabeledSet, ModelConfig, ModelError};
use crate::optim::Optimizer;
use crate::rescaler::{binarize, Rescaler, RescalerConfig, RescalerError};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("non-finite value at step {step}: {source}")]
    Divergence { step: u64, source: GraphError },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Rescaler(#[from] RescalerError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Data the trainer may see. Labels are whatever the caller provides; clean
/// labels only enter through `meta_val` for the clean-validation baseline.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: LabeledSet,
    /// Model selection and early stopping.
    pub val: LabeledSet,
    /// Meta-validation source when `clean_validation_source` is set.
    pub meta_val: Option<LabeledSet>,
}

/// Graph state shared by the inner traversals of one step and its outer
/// update.
pub struct Unrolled {
    pub graph: Graph,
    pub omega: Vec<NodeId>,
    /// Current parameters: leaves, or `θ*` after a retained inner step.
    pub theta: Vec<NodeId>,
    /// At least one inner step was taken with the graph retained.
    pub differentiable: bool,
}

impl Unrolled {
    pub fn theta_values(&self) -> Vec<Matrix> {
        self.theta.iter().map(|&n| self.graph.value(n).clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct InnerOutput {
    /// Continuous rescaler weights (ones when unweighted).
    pub weights: Vec<f64>,
    /// Weights multiplied into the loss.
    pub applied: Vec<f64>,
    pub losses: Vec<f64>,
    pub loss: f64,
    pub stats: Vec<SampleStats>,
}

#[derive(Debug, Clone)]
pub struct MetaGradients {
    pub meta_loss: f64,
    pub meta: Option<Vec<Matrix>>,
    pub outer: Option<Vec<Matrix>>,
    /// Graph size (nodes, scalars) just before the meta backward passes.
    pub retained_nodes: usize,
    pub retained_elements: usize,
}

impl MetaGradients {
    /// Sum of the enabled gradients, `None` if neither is.
    pub fn combined(&self) -> Option<Vec<Matrix>> {
        match (&self.meta, &self.outer) {
            (None, None) => None,
            (Some(a), None) | (None, Some(a)) => Some(a.clone()),
            (Some(a), Some(b)) => Some(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.zip_map(y, |p, q| p + q))
                    .collect(),
            ),
        }
    }
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub model: ClassifierModel,
    pub rescaler: Rescaler,
    pub extractor: FeatureExtractor,
    pub log: RunLog,
    theta_opt: Optimizer,
    omega_opt: Optimizer,
    step: u64,
    outer: u64,
    epoch: usize,
}

fn divergence(step: u64) -> impl Fn(GraphError) -> TrainError {
    move |e| match e {
        GraphError::NonFinite { .. } => TrainError::Divergence { step, source: e },
        other => TrainError::Graph(other),
    }
}

fn lift<T, E: Into<TrainError>>(step: u64, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| match e.into() {
        TrainError::Graph(g) => divergence(step)(g),
        TrainError::Model(ModelError::Graph(g)) => divergence(step)(g),
        TrainError::Rescaler(RescalerError::Graph(g)) => divergence(step)(g),
        TrainError::Feature(FeatureError::Model(ModelError::Graph(g))) => divergence(step)(g),
        other => other,
    })
}

fn check_update(step: u64, params: &[Matrix]) -> Result<()> {
    if params.iter().all(Matrix::is_finite) {
        Ok(())
    } else {
        Err(TrainError::Divergence {
            step,
            source: GraphError::NonFinite { op: "update" },
        })
    }
}

impl Trainer {
    pub fn new(config: TrainerConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let classes = model_config.num_classes;
        let model = ClassifierModel::new(model_config, &mut stream(config.seed, Purpose::Init, 0))?;
        let extractor = FeatureExtractor::new(
            classes,
            config.memory_capacity(),
            config.class_separation,
            config.group_source,
            config.feature_set(),
        );
        let rescaler = Rescaler::init_uniform(
            RescalerConfig {
                input_dim: extractor.feature_dim(),
                hidden_width: config.rescaler_hidden,
                num_groups: extractor.num_groups(),
                binary_mode: config.binary_mode,
                threshold: config.binary_threshold,
            },
            &mut stream(config.seed, Purpose::Init, 1),
        )?;
        let theta_opt = Optimizer::new(config.theta_optimizer, config.theta_lr, config.lr_schedule);
        let omega_opt = Optimizer::new(config.omega_optimizer, config.omega_lr, config.lr_schedule);
        Ok(Self {
            config,
            model,
            rescaler,
            extractor,
            log: RunLog::default(),
            theta_opt,
            omega_opt,
            step: 0,
            outer: 0,
            epoch: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Fresh graph with `ω` and the current `θ` as leaves.
    pub fn begin_unroll(&self) -> Result<Unrolled> {
        let mut graph = Graph::new();
        let omega = self.rescaler.param_nodes(&mut graph)?;
        let theta = self.model.param_nodes(&mut graph)?;
        Ok(Unrolled {
            graph,
            omega,
            theta,
            differentiable: false,
        })
    }

    fn retains_inner_graph(&self) -> bool {
        self.config.mode == Mode::Storm
            && self.config.use_meta_learning
            && self.config.use_meta_grad
            && !self.config.freeze_rescaler
    }

    /// One weighted inner update on `batch`. Updates the class memories and
    /// the real parameters; with a retained graph, `u.theta` becomes `θ*`.
    pub fn inner_step(&mut self, u: &mut Unrolled, batch: &Batch) -> Result<InnerOutput> {
        let step = self.step;
        self.step += 1;
        let storm = self.config.mode == Mode::Storm;
        let theta_now = u.theta_values();
        let (stats, features) = if storm {
            let mut rng = stream(self.config.seed, Purpose::FeatureDropout, step);
            let stats = lift(step, stochastic_passes(&self.model, &theta_now, batch, self.config.passes, &mut rng))?;
            let f = lift(step, self.extractor.observe(&stats))?;
            (stats, Some(f))
        } else {
            (Vec::new(), None)
        };

        let g = &mut u.graph;
        let mut drop_rng = stream(self.config.seed, Purpose::TrainDropout, step);
        let fw = lift(step, self.model.forward_graph(g, &u.theta, &batch.x, Some(&mut drop_rng)))?;
        let losses = lift(step, per_sample_loss(g, fw.probs, &batch.labels))?;
        let (w, soft) = match features {
            Some(f) => {
                let groups: Vec<usize> = batch.labels.iter().map(|&y| self.extractor.group_of(y)).collect();
                let soft = lift(step, self.rescaler.weights_graph(g, &u.omega, &f, &groups))?;
                let soft_vals = g.value(soft).as_slice().to_vec();
                let mut w = soft;
                if self.config.binary_mode {
                    let hard = binarize(&soft_vals, self.config.binary_threshold);
                    let delta = Matrix::column(hard.iter().zip(&soft_vals).map(|(h, s)| h - s).collect());
                    let delta = lift(step, g.constant(delta))?;
                    w = lift(step, g.add(soft, delta))?;
                }
                if self.config.weight_scale != 1.0 {
                    w = lift(step, g.scale(w, self.config.weight_scale))?;
                }
                (w, soft_vals)
            }
            None => {
                let ones = lift(step, g.constant(Matrix::filled(batch.len(), 1, 1.0)))?;
                (ones, vec![1.0; batch.len()])
            }
        };
        let applied = g.value(w).as_slice().to_vec();
        let weighted = lift(step, g.mul(w, losses))?;
        let root = lift(step, g.mean(weighted))?;
        let loss = g.value(root).item();
        let loss_vals = g.value(losses).as_slice().to_vec();

        let retain = self.retains_inner_graph();
        let grads = lift(step, g.backward(root, &u.theta, retain))?;
        self.theta_opt.step(&mut self.model.theta, grads.values());
        check_update(step, &self.model.theta)?;
        if retain {
            let eta = self.config.inner_lr;
            let gnodes = grads.nodes().expect("retained backward returns nodes").to_vec();
            let mut next = Vec::with_capacity(gnodes.len());
            for (&t, &d) in u.theta.iter().zip(&gnodes) {
                let s = lift(step, g.scale(d, eta))?;
                next.push(lift(step, g.sub(t, s))?);
            }
            u.theta = next;
            u.differentiable = true;
        } else {
            *u = self.begin_unroll()?;
        }

        self.log.push(LogRecord::Step(StepRecord {
            step,
            epoch: self.epoch,
            ids: batch.ids.clone(),
            weights: soft.clone(),
            losses: loss_vals.clone(),
            meta_loss: None,
        }));
        Ok(InnerOutput {
            weights: soft,
            applied,
            losses: loss_vals,
            loss,
            stats,
        })
    }

    /// Validation batch of `batch_size` draws with replacement from the
    /// configured source.
    pub fn sample_validation(&mut self, data: &TrainData) -> Result<Batch> {
        let source = if self.config.clean_validation_source {
            data.meta_val
                .as_ref()
                .ok_or_else(|| TrainError::Config("clean_validation_source needs a clean validation set".into()))?
        } else {
            &data.train
        };
        if source.is_empty() {
            return Err(TrainError::Config("validation source is empty".into()));
        }
        let mut rng = stream(self.config.seed, Purpose::ValidationSample, self.outer);
        let idx: Vec<usize> = (0..self.config.batch_size)
            .map(|_| rng.random_range(0..source.len()))
            .collect();
        Ok(source.batch(&idx))
    }

    /// Meta loss on `val` at `u.theta` and the enabled rescaler gradients.
    /// Does not modify any parameter.
    pub fn meta_gradients(&self, u: &mut Unrolled, val: &Batch) -> Result<MetaGradients> {
        let step = self.step;
        let cfg = &self.config;
        let theta_star = u.theta_values();
        let mut rng = stream(cfg.seed, Purpose::MetaDropout, self.outer);
        let stats = lift(step, stochastic_passes(&self.model, &theta_star, val, cfg.passes, &mut rng))?;
        let groups: Vec<usize> = val.labels.iter().map(|&y| self.extractor.group_of(y)).collect();
        let features = if groups.iter().any(|&c| self.extractor.memory(c).is_empty()) {
            // a class not yet seen in training: let its validation samples
            // form their own group statistics
            let mut tmp = self.extractor.clone();
            lift(step, tmp.observe(&stats))?
        } else {
            lift(step, self.extractor.featurize(&stats))?
        };

        let g = &mut u.graph;
        let fw = lift(step, self.model.forward_graph(g, &u.theta, &val.x, None))?;
        let losses = lift(step, per_sample_loss(g, fw.probs, &val.labels))?;
        let through_theta = cfg.use_meta_grad && cfg.use_meta_learning && u.differentiable;
        let mut out = MetaGradients {
            meta_loss: 0.0,
            meta: None,
            outer: None,
            retained_nodes: 0,
            retained_elements: 0,
        };
        if cfg.rescale_meta_loss {
            let mut w = lift(step, self.rescaler.weights_graph(g, &u.omega, &features, &groups))?;
            if cfg.weight_scale != 1.0 {
                w = lift(step, g.scale(w, cfg.weight_scale))?;
            }
            let full = lift(step, g.mul(w, losses))?;
            let full = lift(step, g.mean(full))?;
            out.meta_loss = g.value(full).item();
            out.retained_nodes = g.len();
            out.retained_elements = g.element_count();
            if through_theta {
                let w_fixed = lift(step, g.constant(g.value(w).clone()))?;
                let m = lift(step, g.mul(w_fixed, losses))?;
                let root = lift(step, g.mean(m))?;
                out.meta = Some(lift(step, g.backward_or_zero(root, &u.omega, false))?.into_values());
            }
            if cfg.use_outer_grad {
                let l_fixed = lift(step, g.constant(g.value(losses).clone()))?;
                let m = lift(step, g.mul(w, l_fixed))?;
                let root = lift(step, g.mean(m))?;
                out.outer = Some(lift(step, g.backward_or_zero(root, &u.omega, false))?.into_values());
            }
        } else {
            let root = lift(step, g.mean(losses))?;
            out.meta_loss = g.value(root).item();
            out.retained_nodes = g.len();
            out.retained_elements = g.element_count();
            if through_theta {
                out.meta = Some(lift(step, g.backward_or_zero(root, &u.omega, false))?.into_values());
            }
        }
        Ok(out)
    }

    /// Full outer update; returns `None` when the rescaler is not trained.
    /// Only `ω` and its optimizer state change.
    pub fn outer_step(&mut self, mut u: Unrolled, data: &TrainData) -> Result<Option<MetaGradients>> {
        if !self.config.learns_rescaler() {
            return Ok(None);
        }
        let val = self.sample_validation(data)?;
        let grads = self.meta_gradients(&mut u, &val)?;
        self.outer += 1;
        if let Some(total) = grads.combined() {
            self.omega_opt.step(&mut self.rescaler.omega, &total);
            check_update(self.step, &self.rescaler.omega)?;
        }
        if let Some(LogRecord::Step(last)) = self.log.records.last_mut() {
            last.meta_loss = Some(grads.meta_loss);
        }
        Ok(Some(grads))
    }

    /// Gradient-agreement filtering step on `batch` against a comparison
    /// batch drawn from `train`. Returns the similarities.
    pub fn agra_step(&mut self, batch: &Batch, train: &LabeledSet) -> Result<Vec<f64>> {
        let step = self.step;
        self.step += 1;
        let n_comp = self.config.batch_size.min(train.len());
        let mut rng = stream(self.config.seed, Purpose::Comparison, step);
        let comp_idx = sample(&mut rng, train.len(), n_comp).into_vec();
        let comp = train.batch(&comp_idx);

        let head = |x: &Matrix| -> Result<(Matrix, Matrix)> {
            let mut g = Graph::new();
            let params = self
                .model
                .theta
                .iter()
                .map(|m| g.constant(m.clone()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let fw = lift(step, self.model.forward_graph(&mut g, &params, x, None))?;
            Ok((g.value(fw.penultimate).clone(), g.value(fw.probs).clone()))
        };
        let (h, p) = head(&batch.x)?;
        let (hc, pc) = head(&comp.x)?;
        let e = agra::output_errors(&p, &batch.labels);
        let ec = agra::output_errors(&pc, &comp.labels);
        let (gw, gb) = agra::mean_gradient(&hc, &ec);
        let sims = agra::similarities(&h, &e, &gw, &gb);
        let keep: Vec<bool> = sims
            .iter()
            .map(|&s| if self.config.agra_keep_nonpositive { s <= 0.0 } else { s > 0.0 })
            .collect();
        let losses: Vec<f64> = (0..batch.len())
            .map(|i| -p.get(i, batch.labels[i]).max(crate::models::PROB_FLOOR).ln())
            .collect();

        let kept: Vec<usize> = (0..batch.len()).filter(|&i| keep[i]).collect();
        if !kept.is_empty() {
            let sub = Batch {
                indices: kept.iter().map(|&i| batch.indices[i]).collect(),
                ids: kept.iter().map(|&i| batch.ids[i]).collect(),
                x: batch.x.select_rows(&kept),
                labels: kept.iter().map(|&i| batch.labels[i]).collect(),
            };
            let mut g = Graph::new();
            let theta = self.model.param_nodes(&mut g)?;
            let mut drop_rng = stream(self.config.seed, Purpose::TrainDropout, step);
            let fw = lift(step, self.model.forward_graph(&mut g, &theta, &sub.x, Some(&mut drop_rng)))?;
            let l = lift(step, per_sample_loss(&mut g, fw.probs, &sub.labels))?;
            let root = lift(step, g.mean(l))?;
            let grads = lift(step, g.backward(root, &theta, false))?;
            self.theta_opt.step(&mut self.model.theta, grads.values());
            check_update(step, &self.model.theta)?;
        }
        self.log.push(LogRecord::Step(StepRecord {
            step,
            epoch: self.epoch,
            ids: batch.ids.clone(),
            weights: keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            losses,
            meta_loss: None,
        }));
        Ok(sims)
    }

    /// All traversals of one training step.
    pub fn train_step(&mut self, batches: &[Batch], data: &TrainData) -> Result<()> {
        match self.config.mode {
            Mode::Agra => {
                for b in batches {
                    self.agra_step(b, &data.train)?;
                }
            }
            Mode::None | Mode::Storm => {
                let mut u = self.begin_unroll()?;
                for b in batches {
                    self.inner_step(&mut u, b)?;
                }
                if self.config.mode == Mode::Storm {
                    self.outer_step(u, data)?;
                }
            }
        }
        Ok(())
    }

    /// Selection metric of the current model on `set`.
    pub fn evaluate(&self, set: &LabeledSet) -> Result<f64> {
        let b = set.full_batch();
        let pred = self.model.predict(&b.x)?;
        let positive = match self.config.selection_metric {
            SelectionMetric::Accuracy => 0,
            SelectionMetric::F1 { positive } | SelectionMetric::Mcc { positive } => positive,
        };
        let m = classification_metrics(&pred, &b.labels, positive)
            .map_err(|e| TrainError::Config(format!("evaluation: {e}")))?;
        Ok(match self.config.selection_metric {
            SelectionMetric::Accuracy => m.accuracy,
            SelectionMetric::F1 { .. } => m.f1,
            SelectionMetric::Mcc { .. } => m.mcc,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters from the epoch with the best validation metric.
    pub model: ClassifierModel,
    pub rescaler: Rescaler,
    /// Parameters after the last epoch run.
    pub final_model: ClassifierModel,
    pub final_rescaler: Rescaler,
    pub log: RunLog,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_history: Vec<f64>,
}

/// Epoch loop with shuffled mini-batches, model selection on `data.val` and
/// early stopping.
pub fn train(config: &TrainerConfig, model_config: ModelConfig, data: &TrainData) -> Result<TrainOutput> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::Config("train and validation sets must be nonempty".into()));
    }
    let mut t = Trainer::new(config.clone(), model_config)?;
    let mut best: Option<(f64, usize, ClassifierModel, Rescaler)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut stop_reason = "max_epochs".to_string();
    for epoch in 1..=config.max_epochs {
        t.set_epoch(epoch);
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream(config.seed, Purpose::Shuffle, epoch as u64));
        let batches: Vec<Batch> = order.chunks(config.batch_size).map(|c| data.train.batch(c)).collect();
        let first_record = t.log.records.len();
        for group in batches.chunks(config.inner_loop_count) {
            t.train_step(group, data)?;
        }
        let (mut loss_sum, mut w_sum, mut n) = (0.0, 0.0, 0usize);
        for r in &t.log.records[first_record..] {
            if let LogRecord::Step(s) = r {
                loss_sum += s.losses.iter().sum::<f64>();
                w_sum += s.weights.iter().sum::<f64>();
                n += s.losses.len();
            }
        }
        let metric = t.evaluate(&data.val)?;
        history.push(metric);
        let improved = best.as_ref().is_none_or(|b| metric > b.0);
        if improved {
            best = Some((metric, epoch, t.model.clone(), t.rescaler.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        t.log.push(LogRecord::Epoch(EpochRecord {
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            mean_weight: w_sum / n.max(1) as f64,
            val_metric: metric,
            improved,
        }));
        if since_best >= config.patience {
            stop_reason = "early_stopping".into();
            break;
        }
    }
    let (_, best_epoch, model, rescaler) = best.expect("at least one epoch");
    t.log.push(LogRecord::Stop {
        epoch: epochs_run,
        best_epoch,
        reason: stop_reason,
    });
    Ok(TrainOutput {
        model,
        rescaler,
        final_model: t.model,
        final_rescaler: t.rescaler,
        log: t.log,
        best_epoch,
        epochs_run,
        val_history: history,
    })
}
