//! The trainable classifier: an encoder stage (identity over fixed feature
//! vectors, or a trainable linear map) followed by a linear or one-hidden-layer
//! head and a softmax over the classes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, Matrix, NodeId};
use crate::rng::StreamRng;

/// Smallest probability passed to the log in the cross-entropy loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension {got} does not match model input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A sample's input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    Dense(Vec<f64>),
    Sparse {
        dim: usize,
        indices: Vec<u32>,
        values: Vec<f64>,
    },
}

impl Features {
    pub fn dim(&self) -> usize {
        match self {
            Features::Dense(v) => v.len(),
            Features::Sparse { dim, .. } => *dim,
        }
    }

    /// Writes the dense form into `out`, which must be zeroed and `dim()` long.
    pub fn write_dense(&self, out: &mut [f64]) {
        match self {
            Features::Dense(v) => out.copy_from_slice(v),
            Features::Sparse {
                indices, values, ..
            } => {
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write_dense(&mut out);
        out
    }
}

/// One training example. `clean_label` is ground truth for evaluation only;
/// training code receives a [`LabeledSet`] that never carries it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub features: Features,
    pub noisy_label: usize,
    pub clean_label: Option<usize>,
}

/// Inputs plus one chosen label per sample; the only data view the trainer sees.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub ids: Vec<u64>,
    pub features: Vec<Features>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(ids: Vec<u64>, features: Vec<Features>, labels: Vec<usize>) -> Self {
        assert_eq!(ids.len(), features.len());
        assert_eq!(ids.len(), labels.len());
        Self {
            ids,
            features,
            labels,
        }
    }

    /// View using the (possibly noisy) training labels.
    pub fn noisy(samples: &[SampleRecord]) -> Self {
        Self::new(
            samples.iter().map(|s| s.id).collect(),
            samples.iter().map(|s| s.features.clone()).collect(),
            samples.iter().map(|s| s.noisy_label).collect(),
        )
    }

    /// View using ground-truth labels; `None` if any sample lacks one.
    pub fn clean(samples: &[SampleRecord]) -> Option<Self> {
        let labels = samples
            .iter()
            .map(|s| s.clean_label)
            .collect::<Option<Vec<_>>>()?;
        Some(Self::new(
            samples.iter().map(|s| s.id).collect(),
            samples.iter().map(|s| s.features.clone()).collect(),
            labels,
        ))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Features::dim)
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let dim = self.dim();
        let mut x = Matrix::zeros(idx.len(), dim);
        for (r, &i) in idx.iter().enumerate() {
            self.features[i].write_dense(x.row_mut(r));
        }
        Batch {
            indices: idx.to_vec(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            x,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn full_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// A dense mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions in the originating [`LabeledSet`].
    pub indices: Vec<usize>,
    pub ids: Vec<u64>,
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// Identity over precomputed vectors; dropout hits the features directly.
    FixedFeatures,
    TrainableLinear { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderKind,
    pub head: HeadKind,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn linear(input_dim: usize, num_classes: usize, dropout_rate: f64) -> Self {
        Self {
            input_dim,
            num_classes,
            encoder: EncoderKind::FixedFeatures,
            head: HeadKind::Linear,
            dropout_rate,
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub probs: NodeId,
    /// Input to the final linear layer.
    pub penultimate: NodeId,
}

/// Classifier with parameters `theta`, stored in a fixed order:
/// `[encoder W, encoder b]?`, `[hidden W, hidden b]?`, `head W`, `head b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub theta: Vec<Matrix>,
}

fn uniform_init(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

impl ClassifierModel {
    /// Hidden layers get uniform `±1/sqrt(fan_in)` weights; the final layer
    /// starts at zero so the initial prediction is uniform.
    pub fn new(config: ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(ModelError::InvalidConfig("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                config.dropout_rate
            )));
        }
        let mut theta = Vec::new();
        let mut width = config.input_dim;
        if let EncoderKind::TrainableLinear { width: w } = config.encoder {
            theta.push(uniform_init(rng, width, w));
            theta.push(Matrix::zeros(1, w));
            width = w;
        }
        if let HeadKind::Mlp { hidden } = config.head {
            theta.push(uniform_init(rng, width, hidden));
            theta.push(Matrix::zeros(1, hidden));
            width = hidden;
        }
        theta.push(Matrix::zeros(width, config.num_classes));
        theta.push(Matrix::zeros(1, config.num_classes));
        Ok(Self { config, theta })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.theta.iter().map(Matrix::len).sum()
    }

    /// Adds `theta` to `g` as differentiable leaves.
    pub fn param_nodes(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        self.theta
            .iter()
            .map(|m| g.param(m.clone()).map_err(ModelError::from))
            .collect()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if x.cols() != self.config.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Forward pass using parameter nodes `params` (either leaves from
    /// [`param_nodes`](Self::param_nodes) or updated parameters built in `g`).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: &Matrix,
        dropout: Option<&mut StreamRng>,
    ) -> Result<ForwardNodes> {
        self.check_input(x)?;
        let mut h = g.constant(x.clone())?;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list shorter than model layout");
        if let EncoderKind::TrainableLinear { .. } = self.config.encoder {
            let (w, b) = (next(), next());
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
        }
        if let Some(rng) = dropout {
            h = g.dropout(h, self.config.dropout_rate, rng)?;
        }
        if let HeadKind::Mlp { .. } = self.config.head {
            let (w, b) = (next(), next());
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = g.relu(z)?;
        }
        let penultimate = h;
        let (w, b) = (next(), next());
        let z = g.matmul(h, w)?;
        let logits = g.add_row(z, b)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardNodes {
            logits,
            probs,
            penultimate,
        })
    }

    /// Gradient-free forward returning the `B×C` probability matrix.
    pub fn forward(&self, x: &Matrix, dropout: Option<&mut StreamRng>) -> Result<Matrix> {
        self.forward_with(&self.theta, x, dropout)
    }

    /// As [`forward`](Self::forward) with explicit parameter values.
    pub fn forward_with(
        &self,
        theta: &[Matrix],
        x: &Matrix,
        dropout: Option<&mut StreamRng>,
    ) -> Result<Matrix> {
        let mut g = Graph::new();
        let params = theta
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = self.forward_graph(&mut g, &params, x, dropout)?;
        Ok(g.value(out.probs).clone())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x, None)?))
    }
}

/// `ℓ_i = -ln(max(p[i, label_i], 1e-12))` as an `B×1` node.
pub fn per_sample_loss(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (rows, classes) = g.shape(probs);
    if labels.len() != rows {
        return Err(ModelError::DimensionMismatch {
            expected: rows,
            got: labels.len(),
        });
    }
    let onehot = one_hot(labels, classes)?;
    let oh = g.constant(onehot)?;
    let clamped = g.clamp_min(probs, PROB_FLOOR)?;
    let logp = g.ln(clamped)?;
    let picked = g.mul(logp, oh)?;
    let s = g.sum_cols(picked)?;
    Ok(g.neg(s)?)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(ModelError::LabelOutOfRange { label: l, classes });
        }
        m.set(r, l, 1.0);
    }
    Ok(m)
}

/// Loss values computed directly from a probability matrix.
pub fn loss_values(probs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            if l >= probs.cols() {
                return Err(ModelError::LabelOutOfRange {
                    label: l,
                    classes: probs.cols(),
                });
            }
            Ok(-probs.get(r, l).max(PROB_FLOOR).ln())
        })
        .collect()
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
