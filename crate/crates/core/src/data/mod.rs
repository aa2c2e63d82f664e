//! Dataset ingestion, vectorisation, label-noise injection and splitting.

mod container;
mod noise;
mod split;
mod synthetic;
mod tfidf;

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use container::{read_matrix, read_matrix_from, write_matrix, write_matrix_to, MATRIX_MAGIC};
pub use noise::inject_uniform_noise;
pub use split::{make_splits, two_fold, Split, SplitScheme};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use tfidf::{tokenize, TfIdf};

use crate::models::{Features, SampleRecord};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no samples")]
    NoSamples,
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("dataset has a single class")]
    SingleClass,
    #[error("empty vocabulary after tokenization")]
    EmptyVocabulary,
    #[error("noise rate {0} outside [0, 0.5]")]
    NoiseRate(f64),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("malformed matrix container: {0}")]
    Container(String),
    #[error("invalid synthetic configuration: {0}")]
    Synthetic(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputFormat {
    /// Separator-delimited rows; with `header` columns are addressed by name,
    /// otherwise by zero-based position written as a decimal string.
    Delimited { separator: u8, header: bool, quoting: bool },
    /// One JSON object per line.
    LineJson,
}

/// Which columns carry the input and the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub input_column: String,
    pub input_kind: InputKind,
    pub label_column: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    Text,
    /// Whitespace- or comma-separated numbers (delimited) or a JSON array.
    Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawInputs {
    Texts(Vec<String>),
    Vectors(Vec<Vec<f64>>),
}

impl RawInputs {
    pub fn len(&self) -> usize {
        match self {
            RawInputs::Texts(t) => t.len(),
            RawInputs::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a dataset came from and a digest of how it was preprocessed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub digest: String,
}

/// Labelled inputs before vectorisation. Ids are row positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub inputs: RawInputs,
    pub labels: Vec<usize>,
    /// Label strings in class-index order (first appearance).
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Vectorised samples with ground truth and the flip mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub vocabulary: Option<TfIdf>,
    /// `true` where the label was flipped.
    pub noise_mask: Option<Vec<bool>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.dim())
    }

    pub fn clean_labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.clean_label.unwrap_or(s.noisy_label))
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            vocabulary: self.vocabulary.clone(),
            noise_mask: self.noise_mask.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
            provenance: self.provenance.clone(),
        }
    }

    /// Replaces noisy labels and records which ones differ from ground truth.
    pub fn with_noisy_labels(mut self, noisy: &[usize]) -> Dataset {
        let mut mask = Vec::with_capacity(noisy.len());
        for (s, &y) in self.samples.iter_mut().zip(noisy) {
            let clean = s.clean_label.unwrap_or(s.noisy_label);
            s.clean_label = Some(clean);
            s.noisy_label = y;
            mask.push(y != clean);
        }
        self.noise_mask = Some(mask);
        self
    }
}

/// 64-bit FNV-1a, used for provenance digests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct LabelIndex {
    names: Vec<String>,
    map: HashMap<String, usize>,
}

impl LabelIndex {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            map: HashMap::new(),
        }
    }

    fn index(&mut self, name: &str) -> usize {
        if let Some(&i) = self.map.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.map.insert(name.to_string(), i);
        i
    }
}

fn parse_vector(s: &str, line: u64) -> Result<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Row {
                    line,
                    reason: format!("bad number {t:?}"),
                })
        })
        .collect()
}

/// Reads `path`. Labels become class indices in order of first appearance.
pub fn load_dataset(path: &Path, format: &InputFormat, schema: &Schema) -> Result<RawDataset> {
    let bytes = std::fs::read(path)?;
    let mut ds = parse_dataset(&bytes, format, schema)?;
    ds.provenance.source = path.display().to_string();
    Ok(ds)
}

/// As [`load_dataset`] over in-memory contents.
pub fn parse_dataset(bytes: &[u8], format: &InputFormat, schema: &Schema) -> Result<RawDataset> {
    let mut labels_idx = LabelIndex::new();
    let mut labels = Vec::new();
    let mut texts = Vec::new();
    let mut vectors = Vec::new();
    let mut push_input = |raw: String, line: u64| -> Result<()> {
        match schema.input_kind {
            InputKind::Text => texts.push(raw),
            InputKind::Vector => vectors.push(parse_vector(&raw, line)?),
        }
        Ok(())
    };
    match format {
        InputFormat::Delimited {
            separator,
            header,
            quoting,
        } => {
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(*separator)
                .has_headers(*header)
                .quoting(*quoting)
                .flexible(true)
                .from_reader(bytes);
            let (input_col, label_col) = if *header {
                let h = rdr.headers()?.clone();
                let find = |name: &str| {
                    h.iter()
                        .position(|c| c == name)
                        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
                };
                (find(&schema.input_column)?, find(&schema.label_column)?)
            } else {
                let pos = |name: &str| {
                    name.parse::<usize>()
                        .map_err(|_| DataError::MissingColumn(name.to_string()))
                };
                (pos(&schema.input_column)?, pos(&schema.label_column)?)
            };
            for rec in rdr.records() {
                let rec = rec?;
                let line = rec.position().map_or(0, |p| p.line());
                if rec.len() == 1 && rec.get(0).is_some_and(|f| f.trim().is_empty()) {
                    continue;
                }
                let field = |col: usize, name: &str| {
                    rec.get(col).ok_or_else(|| DataError::Row {
                        line,
                        reason: format!("missing field {name:?}"),
                    })
                };
                let label = field(label_col, &schema.label_column)?.trim();
                if label.is_empty() {
                    return Err(DataError::Row {
                        line,
                        reason: format!("empty field {:?}", schema.label_column),
                    });
                }
                let input = field(input_col, &schema.input_column)?.to_string();
                push_input(input, line)?;
                labels.push(labels_idx.index(label));
            }
        }
        InputFormat::LineJson => {
            let text = std::str::from_utf8(bytes).map_err(|e| DataError::Row {
                line: 0,
                reason: e.to_string(),
            })?;
            for (k, raw) in text.lines().enumerate() {
                let line = k as u64 + 1;
                if raw.trim().is_empty() {
                    continue;
                }
                let row_err = |reason: String| DataError::Row { line, reason };
                let obj: serde_json::Value = serde_json::from_str(raw).map_err(|e| row_err(e.to_string()))?;
                let label = match obj.get(&schema.label_column) {
                    Some(serde_json::Value::String(s)) => s.clone(),
                    Some(serde_json::Value::Number(n)) => n.to_string(),
                    Some(serde_json::Value::Bool(b)) => b.to_string(),
                    _ => return Err(row_err(format!("missing field {:?}", schema.label_column))),
                };
                let input = obj
                    .get(&schema.input_column)
                    .ok_or_else(|| row_err(format!("missing field {:?}", schema.input_column)))?;
                match (schema.input_kind, input) {
                    (InputKind::Text, serde_json::Value::String(s)) => texts.push(s.clone()),
                    (InputKind::Vector, serde_json::Value::Array(a)) => {
                        let v = a
                            .iter()
                            .map(|x| x.as_f64().filter(|f| f.is_finite()))
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(|| row_err("non-numeric vector entry".into()))?;
                        vectors.push(v);
                    }
                    (InputKind::Vector, serde_json::Value::String(s)) => vectors.push(parse_vector(s, line)?),
                    _ => return Err(row_err(format!("unexpected type for {:?}", schema.input_column))),
                }
                labels.push(labels_idx.index(&label));
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::NoSamples);
    }
    if labels_idx.names.len() < 2 {
        return Err(DataError::SingleClass);
    }
    let inputs = match schema.input_kind {
        InputKind::Text => RawInputs::Texts(texts),
        InputKind::Vector => {
            let d = vectors[0].len();
            if let Some(k) = vectors.iter().position(|v| v.len() != d) {
                return Err(DataError::Row {
                    line: k as u64 + 1,
                    reason: format!("vector length {} differs from {d}", vectors[k].len()),
                });
            }
            RawInputs::Vectors(vectors)
        }
    };
    Ok(RawDataset {
        inputs,
        labels,
        class_names: labels_idx.names,
        provenance: Provenance {
            source: "<memory>".into(),
            digest: format!("{:016x}", fnv1a(bytes)),
        },
    })
}

/// Precomputed embeddings from a matrix container plus one label per line.
pub fn load_embeddings(matrix_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let m = read_matrix(matrix_path)?;
    let text = std::fs::read_to_string(labels_path)?;
    let mut idx = LabelIndex::new();
    let labels: Vec<usize> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| idx.index(l.trim()))
        .collect();
    if labels.is_empty() {
        return Err(DataError::NoSamples);
    }
    if labels.len() != m.rows() {
        return Err(DataError::Container(format!(
            "{} labels for {} rows",
            labels.len(),
            m.rows()
        )));
    }
    if idx.names.len() < 2 {
        return Err(DataError::SingleClass);
    }
    let vectors = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
    let mut bytes = std::fs::read(matrix_path)?;
    bytes.extend_from_slice(text.as_bytes());
    Ok(RawDataset {
        inputs: RawInputs::Vectors(vectors),
        labels,
        class_names: idx.names,
        provenance: Provenance {
            source: PathBuf::from(matrix_path).display().to_string(),
            digest: format!("{:016x}", fnv1a(&bytes)),
        },
    })
}

/// Vectorises `raw` with ids equal to row positions. For text inputs the
/// TF-IDF vocabulary is fitted on `fit_rows` only.
pub fn vectorize(raw: &RawDataset, fit_rows: &[usize]) -> Result<Dataset> {
    let (features, vocabulary): (Vec<Features>, Option<TfIdf>) = match &raw.inputs {
        RawInputs::Texts(texts) => {
            let fit: Vec<&str> = fit_rows.iter().map(|&i| texts[i].as_str()).collect();
            let tf = TfIdf::fit(&fit)?;
            (texts.iter().map(|t| tf.transform(t)).collect(), Some(tf))
        }
        RawInputs::Vectors(v) => (v.iter().map(|x| Features::Dense(x.clone())).collect(), None),
    };
    let samples = features
        .into_iter()
        .zip(&raw.labels)
        .enumerate()
        .map(|(i, (features, &y))| SampleRecord {
            id: i as u64,
            features,
            noisy_label: y,
            clean_label: Some(y),
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: raw.num_classes(),
        class_names: raw.class_names.clone(),
        vocabulary,
        noise_mask: None,
        provenance: raw.provenance.clone(),
    })
}
