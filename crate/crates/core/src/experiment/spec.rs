//! Experiment specification and its flat `key = value` grammar.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{InputFormat, InputKind, Schema, SyntheticConfig};
use crate::features::GroupSource;
use crate::models::{EncoderKind, HeadKind};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::trainer::{Mode, TrainerConfig};

use super::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    F1,
    Mcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Delimited,
    Jsonl,
    Embeddings,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitKind {
    /// One shuffled train/val/test partition.
    Fractions { train: f64, val: f64, test: f64 },
    /// `train` fraction for training; the held-out rest is halved and each
    /// half serves once for model selection and once for testing.
    TwoFold { train: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Relative paths resolve against the data directory.
    pub path: PathBuf,
    /// Label file for embeddings.
    pub labels_path: PathBuf,
    pub separator: u8,
    pub header: bool,
    pub quoting: bool,
    pub input_column: String,
    pub label_column: String,
    pub input_kind: InputKind,
    pub split: SplitKind,
    pub synthetic: SyntheticConfig,
    /// Synthetic sample counts per part.
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: PathBuf::new(),
            labels_path: PathBuf::new(),
            separator: b',',
            header: true,
            quoting: true,
            input_column: "text".into(),
            label_column: "label".into(),
            input_kind: InputKind::Text,
            split: SplitKind::Fractions {
                train: 0.8,
                val: 0.1,
                test: 0.1,
            },
            synthetic: SyntheticConfig {
                samples: 0,
                dim: 50,
                num_classes: 2,
                separation: 3.0,
                majority_share: None,
            },
            synthetic_train: 1000,
            synthetic_val: 250,
            synthetic_test: 500,
        }
    }
}

impl DatasetSpec {
    pub fn format(&self) -> InputFormat {
        match self.kind {
            DatasetKind::Jsonl => InputFormat::LineJson,
            _ => InputFormat::Delimited {
                separator: self.separator,
                header: self.header,
                quoting: self.quoting,
            },
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            input_column: self.input_column.clone(),
            input_kind: self.input_kind,
            label_column: self.label_column.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub preset: Option<String>,
    pub seeds: Vec<u64>,
    /// `None`: `<output root>/<name>`.
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub noise_rate: f64,
    /// Inject the same noise rate into the model-selection split.
    pub validation_noise: bool,
    pub metric: MetricKind,
    /// Class name scored by F1 and Matthews; `None` means class index 1.
    pub positive_class: Option<String>,
    pub dropout: f64,
    pub head: HeadKind,
    pub encoder: EncoderKind,
    /// Paired comparison mode run on the same seeds.
    pub baseline: Option<Mode>,
    pub trainer: TrainerConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            preset: None,
            seeds: (1..=10).collect(),
            output_dir: None,
            dataset: DatasetSpec::default(),
            noise_rate: 0.3,
            validation_noise: true,
            metric: MetricKind::Accuracy,
            positive_class: None,
            dropout: 0.1,
            head: HeadKind::Linear,
            encoder: EncoderKind::FixedFeatures,
            baseline: None,
            trainer: TrainerConfig::default(),
        }
    }
}

/// `(key, value)` pairs in document order. Blank lines and lines starting with
/// `#` are skipped; whitespace around keys and values is trimmed.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ExperimentError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ExperimentError::Syntax {
            line: k + 1,
            reason: "expected key = value".into(),
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(ExperimentError::Syntax {
                line: k + 1,
                reason: "empty key".into(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(ExperimentError::Syntax {
                line: k + 1,
                reason: format!("duplicate key {key}"),
            });
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn bad(key: &str, value: &str, expected: &str) -> ExperimentError {
    ExperimentError::Value {
        key: key.into(),
        value: value.into(),
        expected: expected.into(),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool, ExperimentError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn number<T: std::str::FromStr>(key: &str, v: &str, expected: &str) -> Result<T, ExperimentError> {
    v.parse().map_err(|_| bad(key, v, expected))
}

fn real(key: &str, v: &str) -> Result<f64, ExperimentError> {
    number::<f64>(key, v, "a number").and_then(|x| if x.is_finite() { Ok(x) } else { Err(bad(key, v, "a finite number")) })
}

fn mode(key: &str, v: &str) -> Result<Mode, ExperimentError> {
    match v {
        "none" => Ok(Mode::None),
        "storm" => Ok(Mode::Storm),
        "agra" => Ok(Mode::Agra),
        _ => Err(bad(key, v, "none, storm or agra")),
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::None => "none",
        Mode::Storm => "storm",
        Mode::Agra => "agra",
    }
}

fn optimizer(key: &str, v: &str) -> Result<OptimizerKind, ExperimentError> {
    match v {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::ADAM),
        _ => Err(bad(key, v, "sgd or adam")),
    }
}

fn optimizer_name(o: OptimizerKind) -> &'static str {
    match o {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam { .. } => "adam",
    }
}

fn separator_name(s: u8) -> String {
    match s {
        b'\t' => "tab".into(),
        b',' => "comma".into(),
        other => (other as char).to_string(),
    }
}

fn fraction(key: &str, v: &str) -> Result<f64, ExperimentError> {
    let x = real(key, v)?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(bad(key, v, "a number in [0, 1]"))
    }
}

impl ExperimentSpec {
    /// Applies one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ExperimentError> {
        let t = &mut self.trainer;
        let d = &mut self.dataset;
        match key {
            "name" => self.name = v.to_string(),
            "preset" => self.preset = Some(v.to_string()),
            "seeds" => {
                let seeds = v
                    .split(',')
                    .map(|s| number::<u64>(key, s.trim(), "comma-separated integers"))
                    .collect::<Result<Vec<_>, _>>()?;
                self.seeds = seeds;
            }
            "output_dir" => self.output_dir = Some(PathBuf::from(v)),
            "dataset" => {
                d.kind = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "delimited" => DatasetKind::Delimited,
                    "jsonl" => DatasetKind::Jsonl,
                    "embeddings" => DatasetKind::Embeddings,
                    _ => return Err(bad(key, v, "synthetic, delimited, jsonl or embeddings")),
                }
            }
            "data_path" => d.path = PathBuf::from(v),
            "labels_path" => d.labels_path = PathBuf::from(v),
            "separator" => {
                d.separator = match v {
                    "tab" => b'\t',
                    "comma" => b',',
                    s if s.len() == 1 => s.as_bytes()[0],
                    _ => return Err(bad(key, v, "tab, comma or a single character")),
                }
            }
            "header" => d.header = boolean(key, v)?,
            "quoting" => d.quoting = boolean(key, v)?,
            "input_column" => d.input_column = v.to_string(),
            "label_column" => d.label_column = v.to_string(),
            "input_kind" => {
                d.input_kind = match v {
                    "text" => InputKind::Text,
                    "vector" => InputKind::Vector,
                    _ => return Err(bad(key, v, "text or vector")),
                }
            }
            "split" => {
                let train = match d.split {
                    SplitKind::Fractions { train, .. } | SplitKind::TwoFold { train } => train,
                };
                d.split = match v {
                    "fractions" => SplitKind::Fractions {
                        train,
                        val: (1.0 - train) / 2.0,
                        test: (1.0 - train) / 2.0,
                    },
                    "two_fold" => SplitKind::TwoFold { train },
                    _ => return Err(bad(key, v, "fractions or two_fold")),
                }
            }
            "train_fraction" => {
                let x = fraction(key, v)?;
                match &mut d.split {
                    SplitKind::Fractions { train, .. } | SplitKind::TwoFold { train } => *train = x,
                }
            }
            "val_fraction" | "test_fraction" => {
                let x = fraction(key, v)?;
                match &mut d.split {
                    SplitKind::Fractions { val, test, .. } => {
                        if key == "val_fraction" {
                            *val = x
                        } else {
                            *test = x
                        }
                    }
                    SplitKind::TwoFold { .. } => return Err(bad(key, v, "no value (split is two_fold)")),
                }
            }
            "synthetic_train" => d.synthetic_train = number(key, v, "an integer")?,
            "synthetic_val" => d.synthetic_val = number(key, v, "an integer")?,
            "synthetic_test" => d.synthetic_test = number(key, v, "an integer")?,
            "synthetic_dim" => d.synthetic.dim = number(key, v, "an integer")?,
            "synthetic_classes" => d.synthetic.num_classes = number(key, v, "an integer")?,
            "synthetic_separation" => d.synthetic.separation = real(key, v)?,
            "synthetic_majority_share" => {
                d.synthetic.majority_share = if v == "none" { None } else { Some(real(key, v)?) }
            }
            "noise_rate" => self.noise_rate = real(key, v)?,
            "validation_noise" => self.validation_noise = boolean(key, v)?,
            "metric" => {
                self.metric = match v {
                    "accuracy" => MetricKind::Accuracy,
                    "f1" => MetricKind::F1,
                    "mcc" => MetricKind::Mcc,
                    _ => return Err(bad(key, v, "accuracy, f1 or mcc")),
                }
            }
            "positive_class" => self.positive_class = if v == "none" { None } else { Some(v.to_string()) },
            "dropout" => self.dropout = real(key, v)?,
            "head" => {
                self.head = match v.split_once(':') {
                    None if v == "linear" => HeadKind::Linear,
                    Some(("mlp", n)) => HeadKind::Mlp {
                        hidden: number(key, n, "mlp:<width>")?,
                    },
                    _ => return Err(bad(key, v, "linear or mlp:<width>")),
                }
            }
            "encoder" => {
                self.encoder = match v.split_once(':') {
                    None if v == "fixed" => EncoderKind::FixedFeatures,
                    Some(("linear", n)) => EncoderKind::TrainableLinear {
                        width: number(key, n, "linear:<width>")?,
                    },
                    _ => return Err(bad(key, v, "fixed or linear:<width>")),
                }
            }
            "baseline" => self.baseline = if v == "off" { None } else { Some(mode(key, v)?) },
            "mode" => t.mode = mode(key, v)?,
            "inner_loop_count" => t.inner_loop_count = number(key, v, "an integer")?,
            "passes" => t.passes = number(key, v, "an integer")?,
            "batch_size" => t.batch_size = number(key, v, "an integer")?,
            "max_epochs" => t.max_epochs = number(key, v, "an integer")?,
            "patience" => t.patience = number(key, v, "an integer")?,
            "theta_optimizer" => t.theta_optimizer = optimizer(key, v)?,
            "theta_lr" => t.theta_lr = real(key, v)?,
            "inner_lr" => t.inner_lr = real(key, v)?,
            "omega_optimizer" => t.omega_optimizer = optimizer(key, v)?,
            "omega_lr" => t.omega_lr = real(key, v)?,
            "lr_schedule" => {
                t.lr_schedule = match v.split_once(':') {
                    None if v == "constant" => LrSchedule::Constant,
                    Some(("warmup", n)) => LrSchedule::LinearWarmup {
                        steps: number(key, n, "warmup:<steps>")?,
                    },
                    _ => return Err(bad(key, v, "constant or warmup:<steps>")),
                }
            }
            "use_meta_grad" => t.use_meta_grad = boolean(key, v)?,
            "use_outer_grad" => t.use_outer_grad = boolean(key, v)?,
            "use_meta_learning" => t.use_meta_learning = boolean(key, v)?,
            "rescale_meta_loss" => t.rescale_meta_loss = boolean(key, v)?,
            "clean_validation_source" => t.clean_validation_source = boolean(key, v)?,
            "freeze_rescaler" => t.freeze_rescaler = boolean(key, v)?,
            "binary_mode" => t.binary_mode = boolean(key, v)?,
            "binary_threshold" => t.binary_threshold = real(key, v)?,
            "class_separation" => t.class_separation = boolean(key, v)?,
            "loss_only_features" => t.loss_only_features = boolean(key, v)?,
            "group_source" => {
                t.group_source = match v {
                    "memory" => GroupSource::Memory,
                    "batch" => GroupSource::Batch,
                    _ => return Err(bad(key, v, "memory or batch")),
                }
            }
            "memory_size" => t.memory_size = if v == "auto" { None } else { Some(number(key, v, "an integer or auto")?) },
            "rescaler_hidden" => t.rescaler_hidden = number(key, v, "an integer")?,
            "weight_scale" => t.weight_scale = real(key, v)?,
            "agra_keep_nonpositive" => t.agra_keep_nonpositive = boolean(key, v)?,
            _ => return Err(ExperimentError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a config document and then `overrides` (same grammar, one pair
    /// per entry). A `preset` key, from either source, is expanded first; every
    /// other key then applies in order, overrides last.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend(overrides.iter().cloned());
        let mut spec = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, name)) => super::presets::preset(name)?,
            None => ExperimentSpec::default(),
        };
        for (k, v) in &pairs {
            if k != "preset" {
                spec.set(k, v)?;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let conflict = |m: &str| Err(ExperimentError::Conflict(m.to_string()));
        if self.seeds.is_empty() {
            return conflict("seeds must be nonempty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return conflict("seeds must be distinct");
        }
        if !(0.0..=0.5).contains(&self.noise_rate) {
            return conflict("noise_rate must lie in [0, 0.5]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return conflict("dropout must lie in [0, 1)");
        }
        if self.baseline == Some(self.trainer.mode) {
            return conflict("baseline must differ from mode");
        }
        if self.trainer.clean_validation_source && self.trainer.mode != Mode::Storm {
            return conflict("clean_validation_source requires mode = storm");
        }
        if self.metric != MetricKind::Accuracy
            && self.positive_class.is_none()
            && self.dataset.kind != DatasetKind::Synthetic
        {
            return conflict("f1 and mcc need positive_class");
        }
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                if d.synthetic_train == 0 || d.synthetic_val == 0 || d.synthetic_test == 0 {
                    return conflict("synthetic parts must be nonempty");
                }
            }
            _ => {
                if d.path.as_os_str().is_empty() {
                    return conflict("data_path is required for file datasets");
                }
                if d.kind == DatasetKind::Embeddings && d.labels_path.as_os_str().is_empty() {
                    return conflict("labels_path is required for embeddings");
                }
                match d.split {
                    SplitKind::Fractions { train, val, test } => {
                        if ((train + val + test) - 1.0).abs() > 1e-9 {
                            return conflict("train, val and test fractions must sum to 1");
                        }
                        if train == 0.0 || val == 0.0 {
                            return conflict("train and val fractions must be positive");
                        }
                        if test == 0.0 {
                            return conflict("test fraction must be positive (use split = two_fold otherwise)");
                        }
                    }
                    SplitKind::TwoFold { train } => {
                        if !(train > 0.0 && train < 1.0) {
                            return conflict("two_fold needs 0 < train_fraction < 1");
                        }
                    }
                }
            }
        }
        self.trainer
            .validate()
            .map_err(|e| ExperimentError::Conflict(e.to_string()))
    }

    /// Every resolved key, one per line, in a fixed order. Parsing the result
    /// gives back an equal spec.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let t = &self.trainer;
        let d = &self.dataset;
        put("name", self.name.clone());
        if let Some(p) = &self.preset {
            put("preset", p.clone());
        }
        put("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        if let Some(o) = &self.output_dir {
            put("output_dir", o.display().to_string());
        }
        put(
            "dataset",
            match d.kind {
                DatasetKind::Synthetic => "synthetic",
                DatasetKind::Delimited => "delimited",
                DatasetKind::Jsonl => "jsonl",
                DatasetKind::Embeddings => "embeddings",
            }
            .into(),
        );
        put("data_path", d.path.display().to_string());
        put("labels_path", d.labels_path.display().to_string());
        put("separator", separator_name(d.separator));
        put("header", d.header.to_string());
        put("quoting", d.quoting.to_string());
        put("input_column", d.input_column.clone());
        put("label_column", d.label_column.clone());
        put(
            "input_kind",
            match d.input_kind {
                InputKind::Text => "text",
                InputKind::Vector => "vector",
            }
            .into(),
        );
        match d.split {
            SplitKind::Fractions { train, val, test } => {
                put("split", "fractions".into());
                put("train_fraction", format!("{train:?}"));
                put("val_fraction", format!("{val:?}"));
                put("test_fraction", format!("{test:?}"));
            }
            SplitKind::TwoFold { train } => {
                put("split", "two_fold".into());
                put("train_fraction", format!("{train:?}"));
            }
        }
        put("synthetic_train", d.synthetic_train.to_string());
        put("synthetic_val", d.synthetic_val.to_string());
        put("synthetic_test", d.synthetic_test.to_string());
        put("synthetic_dim", d.synthetic.dim.to_string());
        put("synthetic_classes", d.synthetic.num_classes.to_string());
        put("synthetic_separation", format!("{:?}", d.synthetic.separation));
        put(
            "synthetic_majority_share",
            d.synthetic.majority_share.map_or("none".into(), |x| format!("{x:?}")),
        );
        put("noise_rate", format!("{:?}", self.noise_rate));
        put("validation_noise", self.validation_noise.to_string());
        put(
            "metric",
            match self.metric {
                MetricKind::Accuracy => "accuracy",
                MetricKind::F1 => "f1",
                MetricKind::Mcc => "mcc",
            }
            .into(),
        );
        put("positive_class", self.positive_class.clone().unwrap_or_else(|| "none".into()));
        put("dropout", format!("{:?}", self.dropout));
        put(
            "head",
            match self.head {
                HeadKind::Linear => "linear".into(),
                HeadKind::Mlp { hidden } => format!("mlp:{hidden}"),
            },
        );
        put(
            "encoder",
            match self.encoder {
                EncoderKind::FixedFeatures => "fixed".into(),
                EncoderKind::TrainableLinear { width } => format!("linear:{width}"),
            },
        );
        put("baseline", self.baseline.map_or("off", mode_name).into());
        put("mode", mode_name(t.mode).into());
        put("inner_loop_count", t.inner_loop_count.to_string());
        put("passes", t.passes.to_string());
        put("batch_size", t.batch_size.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        put("theta_optimizer", optimizer_name(t.theta_optimizer).into());
        put("theta_lr", format!("{:?}", t.theta_lr));
        put("inner_lr", format!("{:?}", t.inner_lr));
        put("omega_optimizer", optimizer_name(t.omega_optimizer).into());
        put("omega_lr", format!("{:?}", t.omega_lr));
        put(
            "lr_schedule",
            match t.lr_schedule {
                LrSchedule::Constant => "constant".into(),
                LrSchedule::LinearWarmup { steps } => format!("warmup:{steps}"),
            },
        );
        put("use_meta_grad", t.use_meta_grad.to_string());
        put("use_outer_grad", t.use_outer_grad.to_string());
        put("use_meta_learning", t.use_meta_learning.to_string());
        put("rescale_meta_loss", t.rescale_meta_loss.to_string());
        put("clean_validation_source", t.clean_validation_source.to_string());
        put("freeze_rescaler", t.freeze_rescaler.to_string());
        put("binary_mode", t.binary_mode.to_string());
        put("binary_threshold", format!("{:?}", t.binary_threshold));
        put("class_separation", t.class_separation.to_string());
        put("loss_only_features", t.loss_only_features.to_string());
        put(
            "group_source",
            match t.group_source {
                GroupSource::Memory => "memory",
                GroupSource::Batch => "batch",
            }
            .into(),
        );
        put("memory_size", t.memory_size.map_or("auto".into(), |m| m.to_string()));
        put("rescaler_hidden", t.rescaler_hidden.to_string());
        put("weight_scale", format!("{:?}", t.weight_scale));
        put("agra_keep_nonpositive", t.agra_keep_nonpositive.to_string());
        s
    }
}
