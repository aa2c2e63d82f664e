//! Per-class loss rescaling networks.
//!
//! Each class group `c` owns a small network
//! `softmax(BN2(L2(relu(BN1(L1 f)))))` whose first output is the sample's loss
//! weight. BN2 carries a learnable scale but no shift: with its batch mean
//! pinned at zero, the logit difference of the two outputs is centred over the
//! batch, so at least one sample of every group of size ≥ 2 receives a weight
//! of at least one half.
//!
//! L2 starts at zero, which makes every weight exactly 0.5 before training.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::graph::{Graph, GraphError, Matrix, NodeId};
use crate::rng::StreamRng;

pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN_WIDTH: usize = 32;
/// Tensors per class group, in [`PARAM_NAMES`] order.
pub const PARAMS_PER_GROUP: usize = 7;
pub const PARAM_NAMES: [&str; PARAMS_PER_GROUP] = [
    "l1.weight",
    "l1.bias",
    "bn1.scale",
    "bn1.shift",
    "l2.weight",
    "l2.bias",
    "bn2.scale",
];

const CHECKPOINT_MAGIC: &str = "storm-rescaler";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RescalerError {
    #[error("feature dimension {got} does not match rescaler input dimension {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("group {group} out of range for {groups} rescaler groups")]
    GroupOutOfRange { group: usize, groups: usize },
    #[error("features and group assignments differ in length ({features} vs {groups})")]
    LengthMismatch { features: usize, groups: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid rescaler configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, RescalerError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RescalerConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_groups: usize,
    pub binary_mode: bool,
    /// Only read in binary mode.
    pub threshold: f64,
}

impl RescalerConfig {
    pub fn new(input_dim: usize, num_groups: usize) -> Self {
        Self {
            input_dim,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            num_groups,
            binary_mode: false,
            threshold: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.num_groups == 0 {
            return Err(RescalerError::InvalidConfig(
                "input_dim, hidden_width and num_groups must be positive".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(RescalerError::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescaler {
    pub config: RescalerConfig,
    /// `PARAMS_PER_GROUP` tensors per group, groups in order.
    pub omega: Vec<Matrix>,
}

impl Rescaler {
    /// L1 uniform in `±1/sqrt(input_dim)`, L2 zero, batch-norm affine at
    /// identity.
    pub fn init_uniform(config: RescalerConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.input_dim, config.hidden_width);
        let bound = 1.0 / (d as f64).sqrt();
        let mut omega = Vec::with_capacity(config.num_groups * PARAMS_PER_GROUP);
        for _ in 0..config.num_groups {
            let w1 = (0..d * h).map(|_| rng.random_range(-bound..bound)).collect();
            omega.push(Matrix::from_vec(d, h, w1));
            omega.push(Matrix::zeros(1, h));
            omega.push(Matrix::filled(1, h, 1.0));
            omega.push(Matrix::zeros(1, h));
            omega.push(Matrix::zeros(h, 2));
            omega.push(Matrix::zeros(1, 2));
            omega.push(Matrix::filled(1, 2, 1.0));
        }
        Ok(Self { config, omega })
    }

    pub fn num_groups(&self) -> usize {
        self.config.num_groups
    }

    /// The tensors of group `c`.
    pub fn group_params(&self, c: usize) -> &[Matrix] {
        &self.omega[c * PARAMS_PER_GROUP..(c + 1) * PARAMS_PER_GROUP]
    }

    pub fn group_params_mut(&mut self, c: usize) -> &mut [Matrix] {
        &mut self.omega[c * PARAMS_PER_GROUP..(c + 1) * PARAMS_PER_GROUP]
    }

    pub fn param_nodes(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        self.omega
            .iter()
            .map(|m| g.param(m.clone()).map_err(RescalerError::from))
            .collect()
    }

    fn check_inputs(&self, features: &Matrix, groups: &[usize]) -> Result<()> {
        if features.rows() == 0 {
            return Err(RescalerError::EmptyBatch);
        }
        if features.cols() != self.config.input_dim {
            return Err(RescalerError::FeatureDim {
                expected: self.config.input_dim,
                got: features.cols(),
            });
        }
        if features.rows() != groups.len() {
            return Err(RescalerError::LengthMismatch {
                features: features.rows(),
                groups: groups.len(),
            });
        }
        if let Some(&bad) = groups.iter().find(|&&c| c >= self.config.num_groups) {
            return Err(RescalerError::GroupOutOfRange {
                group: bad,
                groups: self.config.num_groups,
            });
        }
        Ok(())
    }

    /// `B×2` softmax pairs `[w0, w1]`; row `i` goes through the network of
    /// `groups[i]` with batch statistics taken over that group's rows only.
    pub fn pairs_graph(
        &self,
        g: &mut Graph,
        omega: &[NodeId],
        features: &Matrix,
        groups: &[usize],
    ) -> Result<NodeId> {
        self.check_inputs(features, groups)?;
        let b = features.rows();
        let x_all = g.constant(features.clone())?;
        let mut total: Option<NodeId> = None;
        for c in 0..self.config.num_groups {
            let idx: Vec<usize> = (0..b).filter(|&i| groups[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let p = &omega[c * PARAMS_PER_GROUP..(c + 1) * PARAMS_PER_GROUP];
            let x = g.gather_rows(x_all, &idx)?;
            let pairs = group_forward(g, p, x, idx.len())?;
            let placed = g.scatter_rows(pairs, &idx, b)?;
            total = Some(match total {
                Some(t) => g.add(t, placed)?,
                None => placed,
            });
        }
        Ok(total.expect("nonempty batch has at least one group"))
    }

    /// Continuous `w0` as a `B×1` node.
    pub fn weights_graph(
        &self,
        g: &mut Graph,
        omega: &[NodeId],
        features: &Matrix,
        groups: &[usize],
    ) -> Result<NodeId> {
        let pairs = self.pairs_graph(g, omega, features, groups)?;
        let first = g.constant(Matrix::column(vec![1.0, 0.0]))?;
        Ok(g.matmul(pairs, first)?)
    }

    /// Weights to apply to the inner loss: continuous `w0`, or in binary mode
    /// the thresholded values with the continuous gradient passed straight
    /// through.
    pub fn applied_weights_graph(
        &self,
        g: &mut Graph,
        omega: &[NodeId],
        features: &Matrix,
        groups: &[usize],
    ) -> Result<NodeId> {
        let w = self.weights_graph(g, omega, features, groups)?;
        if !self.config.binary_mode {
            return Ok(w);
        }
        let soft = g.value(w).clone();
        let hard = binarize(soft.as_slice(), self.config.threshold);
        let delta = Matrix::column(hard.iter().zip(soft.as_slice()).map(|(h, s)| h - s).collect());
        let delta = g.constant(delta)?;
        Ok(g.add(w, delta)?)
    }

    /// Gradient-free continuous weights.
    pub fn weights(&self, features: &Matrix, groups: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let omega = self
            .omega
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let w = self.weights_graph(&mut g, &omega, features, groups)?;
        Ok(g.value(w).as_slice().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    /// Text checkpoint; see `docs/formats.md`.
    pub fn to_checkpoint_string(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "input_dim {}", c.input_dim);
        let _ = writeln!(s, "hidden_width {}", c.hidden_width);
        let _ = writeln!(s, "num_groups {}", c.num_groups);
        let _ = writeln!(s, "binary_mode {}", c.binary_mode);
        let _ = writeln!(s, "threshold {}", c.threshold);
        for (k, m) in self.omega.iter().enumerate() {
            let name = format!("group{}.{}", k / PARAMS_PER_GROUP, PARAM_NAMES[k % PARAMS_PER_GROUP]);
            let _ = writeln!(s, "tensor {name} {} {}", m.rows(), m.cols());
            let vals: Vec<String> = m.as_slice().iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |msg: String| RescalerError::Checkpoint(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(bad(format!("expected {key}, found {line:?}"))),
            }
        };
        let parse_usize = |v: String, k: &str| v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
        let input_dim = parse_usize(field("input_dim")?, "input_dim")?;
        let hidden_width = parse_usize(field("hidden_width")?, "hidden_width")?;
        let num_groups = parse_usize(field("num_groups")?, "num_groups")?;
        let binary_mode = field("binary_mode")?
            .parse::<bool>()
            .map_err(|e| bad(format!("binary_mode: {e}")))?;
        let threshold = field("threshold")?
            .parse::<f64>()
            .map_err(|e| bad(format!("threshold: {e}")))?;
        let config = RescalerConfig {
            input_dim,
            hidden_width,
            num_groups,
            binary_mode,
            threshold,
        };
        config.validate()?;
        let (d, h) = (input_dim, hidden_width);
        let shapes = [(d, h), (1, h), (1, h), (1, h), (h, 2), (1, 2), (1, 2)];
        let mut omega = Vec::with_capacity(num_groups * PARAMS_PER_GROUP);
        for k in 0..num_groups * PARAMS_PER_GROUP {
            let name = format!("group{}.{}", k / PARAMS_PER_GROUP, PARAM_NAMES[k % PARAMS_PER_GROUP]);
            let head = lines.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
            let (r, c) = shapes[k % PARAMS_PER_GROUP];
            if head != format!("tensor {name} {r} {c}") {
                return Err(bad(format!("expected tensor {name} {r} {c}, found {head:?}")));
            }
            let body = lines.next().ok_or_else(|| bad(format!("missing values of {name}")))?;
            let vals = body
                .split_ascii_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("{name}: {e}")))?;
            if vals.len() != r * c || vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{name}: expected {} finite values", r * c)));
            }
            omega.push(Matrix::from_vec(r, c, vals));
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content".into()));
        }
        Ok(Self { config, omega })
    }
}

/// One group's network on its `n` rows. Batch statistics are skipped when
/// `n == 1`; the affine terms still apply.
fn group_forward(g: &mut Graph, p: &[NodeId], x: NodeId, n: usize) -> Result<NodeId> {
    let [w1, b1, s1, t1, w2, b2, s2] = [p[0], p[1], p[2], p[3], p[4], p[5], p[6]];
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = if n >= 2 {
        g.batch_norm(h, Some(s1), Some(t1), BN_EPS)?
    } else {
        let h = g.mul_row(h, s1)?;
        g.add_row(h, t1)?
    };
    let h = g.relu(h)?;
    let z = g.matmul(h, w2)?;
    let z = g.add_row(z, b2)?;
    let z = if n >= 2 {
        g.batch_norm(z, Some(s2), None, BN_EPS)?
    } else {
        g.mul_row(z, s2)?
    };
    Ok(g.softmax(z)?)
}

/// `1` where `w >= threshold`, else `0`.
pub fn binarize(w: &[f64], threshold: f64) -> Vec<f64> {
    w.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests;
