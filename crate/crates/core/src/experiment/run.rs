//! Multi-seed orchestration, artifacts and aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, inject_uniform_noise, load_dataset, load_embeddings, make_splits, two_fold, vectorize,
    write_matrix, Dataset, RawDataset, SplitScheme,
};
use crate::metrics::{calibration_from_probs, classification_metrics, rescaler_roc, weight_analyses, Calibration, DOWNSCALE_FRACTION};
use crate::models::{LabeledSet, ModelConfig};
use crate::rng::{stream, Purpose};
use crate::trainer::{train, Mode, RunLog, SelectionMetric, TrainData, TrainOutput};

use super::spec::{mode_name, DatasetKind, ExperimentSpec, MetricKind, SplitKind};
use super::ExperimentError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One train/val/test assignment with labels already corrupted.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub val: Dataset,
    /// Clean labels.
    pub test: Dataset,
}

/// Directory holding input files: `STORM_DATA_DIR` or the working directory.
pub fn data_dir() -> PathBuf {
    std::env::var_os("STORM_DATA_DIR").map_or_else(|| PathBuf::from("."), PathBuf::from)
}

/// Root for experiment outputs: `STORM_OUTPUT_ROOT` or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("STORM_OUTPUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn output_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.output_dir.clone().unwrap_or_else(|| output_root().join(&spec.name))
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Reads the dataset file(s) of a file-backed spec; `None` for synthetic data.
pub fn load_raw(spec: &ExperimentSpec, dir: &Path) -> Result<Option<RawDataset>, ExperimentError> {
    let d = &spec.dataset;
    Ok(match d.kind {
        DatasetKind::Synthetic => None,
        DatasetKind::Embeddings => Some(load_embeddings(&resolve(dir, &d.path), &resolve(dir, &d.labels_path))?),
        DatasetKind::Delimited | DatasetKind::Jsonl => Some(load_dataset(&resolve(dir, &d.path), &d.format(), &d.schema())?),
    })
}

fn corrupt(ds: Dataset, rate: f64, seed: u64, purpose: Purpose, fold: u64) -> Result<Dataset, ExperimentError> {
    let clean = ds.clean_labels();
    let (noisy, _) = inject_uniform_noise(&clean, ds.num_classes, rate, &mut stream(seed, purpose, fold))?;
    Ok(ds.with_noisy_labels(&noisy))
}

/// Splits, vectorises and corrupts the data for one seed.
pub fn prepare_folds(spec: &ExperimentSpec, raw: Option<&RawDataset>, seed: u64) -> Result<Vec<Fold>, ExperimentError> {
    let d = &spec.dataset;
    let mut parts: Vec<(Dataset, Dataset, Dataset)> = Vec::new();
    match raw {
        None => {
            let mut cfg = d.synthetic.clone();
            cfg.samples = d.synthetic_train + d.synthetic_val + d.synthetic_test;
            let all = generate_synthetic(&cfg, &mut stream(seed, Purpose::Synthetic, 0))?;
            let (a, b) = (d.synthetic_train, d.synthetic_train + d.synthetic_val);
            let range = |lo: usize, hi: usize| (lo..hi).collect::<Vec<_>>();
            parts.push((
                all.subset(&range(0, a)),
                all.subset(&range(a, b)),
                all.subset(&range(b, cfg.samples)),
            ));
        }
        Some(raw) => {
            let mut rng = stream(seed, Purpose::Split, 0);
            match d.split {
                SplitKind::Fractions { train, val, test } => {
                    let s = make_splits(&raw.labels, SplitScheme::Fractions { train, val, test }, &mut rng)?.remove(0);
                    let all = vectorize(raw, &s.train)?;
                    parts.push((all.subset(&s.train), all.subset(&s.val), all.subset(&s.test)));
                }
                SplitKind::TwoFold { train } => {
                    let s = make_splits(
                        &raw.labels,
                        SplitScheme::Fractions {
                            train,
                            val: 1.0 - train,
                            test: 0.0,
                        },
                        &mut rng,
                    )?
                    .remove(0);
                    let all = vectorize(raw, &s.train)?;
                    let (h0, h1) = two_fold(s.val.len(), &mut stream(seed, Purpose::Split, 1))?;
                    let pick = |h: &[usize]| h.iter().map(|&i| s.val[i]).collect::<Vec<_>>();
                    let (a, b) = (pick(&h0), pick(&h1));
                    parts.push((all.subset(&s.train), all.subset(&a), all.subset(&b)));
                    parts.push((all.subset(&s.train), all.subset(&b), all.subset(&a)));
                }
            }
        }
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(k, (train, val, test))| {
            let k = k as u64;
            let train = corrupt(train, spec.noise_rate, seed, Purpose::Noise, k)?;
            let val = if spec.validation_noise {
                corrupt(val, spec.noise_rate, seed, Purpose::ValidationNoise, k)?
            } else {
                val
            };
            Ok(Fold { train, val, test })
        })
        .collect()
}

fn positive_index(spec: &ExperimentSpec, class_names: &[String]) -> Result<usize, ExperimentError> {
    match &spec.positive_class {
        Some(name) => class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| ExperimentError::Conflict(format!("positive_class {name:?} is not a label"))),
        None => Ok(1.min(class_names.len().saturating_sub(1))),
    }
}

fn selection(spec: &ExperimentSpec, positive: usize) -> SelectionMetric {
    match spec.metric {
        MetricKind::Accuracy => SelectionMetric::Accuracy,
        MetricKind::F1 => SelectionMetric::F1 { positive },
        MetricKind::Mcc => SelectionMetric::Mcc { positive },
    }
}

/// Test metrics and training-set analyses of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    /// The spec's metric.
    pub headline: f64,
    /// Final-model calibration on the training set against its noisy labels.
    pub ece_noisy: f64,
    /// As `ece_noisy` against the ground truth.
    pub ece_clean: f64,
    /// Rescaler noise-detection AUC per epoch (`None` without noisy samples).
    pub auc_by_epoch: Vec<Option<f64>>,
    /// Mean clean weight minus mean noisy weight per epoch.
    pub gap_by_epoch: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn noise_map(ds: &Dataset) -> BTreeMap<u64, bool> {
    let mask = ds.noise_mask.clone().unwrap_or_else(|| vec![false; ds.len()]);
    ds.samples.iter().zip(mask).map(|(s, m)| (s.id, m)).collect()
}

pub struct FoldRun {
    pub output: TrainOutput,
    pub result: FoldResult,
    pub reliability_noisy: Calibration,
    pub reliability_clean: Calibration,
}

/// Trains `mode` on one fold and evaluates it.
pub fn run_fold(spec: &ExperimentSpec, mode: Mode, fold: &Fold, seed: u64) -> Result<FoldRun, ExperimentError> {
    let positive = positive_index(spec, &fold.train.class_names)?;
    let mut config = spec.trainer.clone();
    config.mode = mode;
    config.seed = seed;
    config.selection_metric = selection(spec, positive);
    let meta_val = if config.clean_validation_source {
        LabeledSet::clean(&fold.val.samples)
    } else {
        None
    };
    let data = TrainData {
        train: LabeledSet::noisy(&fold.train.samples),
        val: LabeledSet::noisy(&fold.val.samples),
        meta_val,
    };
    let model_config = ModelConfig {
        input_dim: fold.train.dim(),
        num_classes: fold.train.num_classes,
        encoder: spec.encoder,
        head: spec.head,
        dropout_rate: spec.dropout,
    };
    let output = train(&config, model_config, &data)?;

    let test = LabeledSet::clean(&fold.test.samples).unwrap_or_else(|| LabeledSet::noisy(&fold.test.samples));
    let pred = output.model.predict(&test.full_batch().x)?;
    let m = classification_metrics(&pred, &test.labels, positive)?;
    let headline = match spec.metric {
        MetricKind::Accuracy => m.accuracy,
        MetricKind::F1 => m.f1,
        MetricKind::Mcc => m.mcc,
    };

    let probs = output.final_model.forward(&data.train.full_batch().x, None)?;
    let reliability_noisy = calibration_from_probs(&probs, &data.train.labels, crate::metrics::DEFAULT_BINS)?;
    let reliability_clean = calibration_from_probs(&probs, &fold.train.clean_labels(), crate::metrics::DEFAULT_BINS)?;

    let noise = noise_map(&fold.train);
    let epochs = output.log.epoch_weights();
    let mut auc_by_epoch = Vec::new();
    for e in &epochs {
        let mask: Vec<bool> = e.ids.iter().map(|id| noise[id]).collect();
        auc_by_epoch.push(rescaler_roc(&e.weights, &mask)?.map(|r| r.auc));
    }
    let gap_by_epoch = weight_analyses(&epochs, Some(&noise), DOWNSCALE_FRACTION)
        .progression
        .iter()
        .map(|r| r.gap())
        .collect();
    let result = FoldResult {
        accuracy: m.accuracy,
        f1: m.f1,
        mcc: m.mcc,
        headline,
        ece_noisy: reliability_noisy.ece,
        ece_clean: reliability_clean.ece,
        auc_by_epoch,
        gap_by_epoch,
        best_epoch: output.best_epoch,
        epochs_run: output.epochs_run,
    };
    Ok(FoldRun {
        output,
        result,
        reliability_noisy,
        reliability_clean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub mode: String,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    /// Fold means of the scalar metrics.
    pub summary: BTreeMap<String, f64>,
}

fn summarize(folds: &[FoldResult]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in folds {
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                acc.entry(k.to_string()).or_default().push(v);
            }
        };
        put("accuracy", Some(f.accuracy));
        put("f1", Some(f.f1));
        put("mcc", Some(f.mcc));
        put("headline", Some(f.headline));
        put("ece_noisy", Some(f.ece_noisy));
        put("ece_clean", Some(f.ece_clean));
        put("auc_first", f.auc_by_epoch.first().copied().flatten());
        put("auc_final", f.auc_by_epoch.last().copied().flatten());
        put("gap_first", f.gap_by_epoch.first().copied().flatten());
        put("gap_final", f.gap_by_epoch.last().copied().flatten());
        put("best_epoch", Some(f.best_epoch as f64));
    }
    acc.into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            (k, v.iter().sum::<f64>() / n)
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|e| ExperimentError::io(path, e))
}

fn write_fold_artifacts(dir: &Path, mode: Mode, fold: &Fold, run: &FoldRun) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let log_path = dir.join("log.jsonl");
    let f = fs::File::create(&log_path).map_err(|e| ExperimentError::io(&log_path, e))?;
    let mut w = BufWriter::new(f);
    run.output.log.write_jsonl(&mut w).map_err(|e| ExperimentError::io(&log_path, e))?;
    w.flush().map_err(|e| ExperimentError::io(&log_path, e))?;

    let mut noise = String::from("id,noisy\n");
    for (id, m) in noise_map(&fold.train) {
        noise.push_str(&format!("{id},{}\n", u8::from(m)));
    }
    write_text(&dir.join("noise.csv"), &noise)?;

    let mut rel = String::from("labels,lo,hi,mean_confidence,mean_accuracy,count\n");
    for (name, c) in [("noisy", &run.reliability_noisy), ("clean", &run.reliability_clean)] {
        for b in &c.bins {
            rel.push_str(&format!(
                "{name},{:?},{:?},{:?},{:?},{}\n",
                b.lo, b.hi, b.mean_confidence, b.mean_accuracy, b.count
            ));
        }
    }
    write_text(&dir.join("reliability.csv"), &rel)?;

    for (k, m) in run.output.model.theta.iter().enumerate() {
        let p = dir.join(format!("model-{k}.mat"));
        write_matrix(&p, m)?;
    }
    if mode == Mode::Storm {
        run.output.rescaler.save(&dir.join("rescaler.ckpt"))?;
    }
    Ok(())
}

fn seed_dir(root: &Path, mode: Mode, seed: u64) -> PathBuf {
    root.join(mode_name(mode)).join(format!("seed-{seed}"))
}

/// Runs all folds of one seed under `mode` and writes its run directory.
pub fn run_seed(
    spec: &ExperimentSpec,
    raw: Option<&RawDataset>,
    mode: Mode,
    seed: u64,
    root: &Path,
) -> Result<SeedResult, ExperimentError> {
    let dir = seed_dir(root, mode, seed);
    let folds = prepare_folds(spec, raw, seed)?;
    let mut results = Vec::new();
    for (k, fold) in folds.iter().enumerate() {
        let run = run_fold(spec, mode, fold, seed)?;
        write_fold_artifacts(&dir.join(format!("fold-{k}")), mode, fold, &run)?;
        results.push(run.result);
    }
    let result = SeedResult {
        mode: mode_name(mode).to_string(),
        seed,
        summary: summarize(&results),
        folds: results,
    };
    let path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&result).map_err(|e| ExperimentError::Format(e.to_string()))?;
    write_text(&path, &(text + "\n"))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Summary>,
}

/// `mode − baseline` over seeds present in both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub mode: String,
    pub baseline: String,
    pub metric: String,
    pub difference: Summary,
    /// Seeds where `mode` scored strictly higher.
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub mode: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub version: String,
    pub modes: Vec<ModeReport>,
    pub paired: Vec<PairedReport>,
    pub failures: Vec<Failure>,
}

impl Report {
    pub fn mode(&self, mode: Mode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode_name(mode))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} (version {})\n", self.name, self.version);
        for m in &self.modes {
            s.push_str(&format!("mode {} over {} seeds\n", m.mode, m.seeds.len()));
            for (k, v) in &m.metrics {
                s.push_str(&format!("  {k:<12} {:.4} ± {:.4} (n={})\n", v.mean, v.std, v.n));
            }
        }
        for p in &self.paired {
            s.push_str(&format!(
                "{} − {} on {}: {:.4} ± {:.4}, {} of {} seeds higher\n",
                p.mode, p.baseline, p.metric, p.difference.mean, p.difference.std, p.wins, p.difference.n
            ));
        }
        for f in &self.failures {
            s.push_str(&format!("FAILED {} seed {}: {}\n", f.mode, f.seed, f.error));
        }
        s
    }
}

fn modes_of(spec: &ExperimentSpec) -> Vec<Mode> {
    let mut v = vec![spec.trainer.mode];
    v.extend(spec.baseline);
    v
}

/// Reduces per-seed results into a report.
pub fn reduce(spec: &ExperimentSpec, results: &[SeedResult], failures: Vec<Failure>) -> Report {
    let mut modes = Vec::new();
    for mode in modes_of(spec) {
        let name = mode_name(mode);
        let mut rs: Vec<&SeedResult> = results.iter().filter(|r| r.mode == name).collect();
        rs.sort_by_key(|r| r.seed);
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &rs {
            for (k, v) in &r.summary {
                values.entry(k.clone()).or_default().push(*v);
            }
        }
        modes.push(ModeReport {
            mode: name.to_string(),
            seeds: rs.iter().map(|r| r.seed).collect(),
            metrics: values
                .iter()
                .filter_map(|(k, v)| Summary::of(v).map(|s| (k.clone(), s)))
                .collect(),
        });
    }
    let mut paired = Vec::new();
    if let Some(base) = spec.baseline {
        let (a, b) = (mode_name(spec.trainer.mode), mode_name(base));
        let find = |mode: &str, seed: u64| results.iter().find(|r| r.mode == mode && r.seed == seed);
        for metric in ["headline", "accuracy", "f1", "mcc"] {
            let mut diffs = Vec::new();
            for &seed in &spec.seeds {
                if let (Some(x), Some(y)) = (find(a, seed), find(b, seed)) {
                    if let (Some(p), Some(q)) = (x.summary.get(metric), y.summary.get(metric)) {
                        diffs.push(p - q);
                    }
                }
            }
            if let Some(difference) = Summary::of(&diffs) {
                paired.push(PairedReport {
                    mode: a.to_string(),
                    baseline: b.to_string(),
                    metric: metric.to_string(),
                    wins: diffs.iter().filter(|&&d| d > 0.0).count(),
                    difference,
                });
            }
        }
    }
    Report {
        name: spec.name.clone(),
        version: VERSION.to_string(),
        modes,
        paired,
        failures,
    }
}

fn write_report(root: &Path, report: &Report) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| ExperimentError::Format(e.to_string()))?;
    write_text(&root.join("report.json"), &(text + "\n"))?;
    write_text(&root.join("report.txt"), &report.to_text())
}

/// Runs every seed for the spec's mode and baseline, writing all artifacts
/// under `root`. Failed seeds are recorded in the report, not raised.
pub fn run_experiment(spec: &ExperimentSpec, root: &Path, data: &Path) -> Result<Report, ExperimentError> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| ExperimentError::io(root, e))?;
    write_text(&root.join("spec.conf"), &spec.to_config_string())?;
    write_text(&root.join("version.txt"), &format!("{VERSION}\n"))?;
    let raw = load_raw(spec, data)?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for mode in modes_of(spec) {
        for &seed in &spec.seeds {
            match run_seed(spec, raw.as_ref(), mode, seed, root) {
                Ok(r) => results.push(r),
                Err(e) => {
                    let dir = seed_dir(root, mode, seed);
                    let _ = fs::create_dir_all(&dir);
                    let _ = fs::write(dir.join("error.txt"), format!("{e}\n"));
                    failures.push(Failure {
                        mode: mode_name(mode).to_string(),
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let report = reduce(spec, &results, failures);
    write_report(root, &report)?;
    Ok(report)
}

/// Rebuilds the report of an existing experiment directory from its
/// `spec.conf` and per-seed `metrics.json` / `error.txt` files.
pub fn aggregate(root: &Path) -> Result<Report, ExperimentError> {
    let spec_path = root.join("spec.conf");
    let text = fs::read_to_string(&spec_path).map_err(|e| ExperimentError::io(&spec_path, e))?;
    let spec = ExperimentSpec::parse(&text, &[])?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for mode in modes_of(&spec) {
        for &seed in &spec.seeds {
            let dir = seed_dir(root, mode, seed);
            let metrics = dir.join("metrics.json");
            let error = dir.join("error.txt");
            if metrics.exists() {
                let f = fs::File::open(&metrics).map_err(|e| ExperimentError::io(&metrics, e))?;
                let r: SeedResult = serde_json::from_reader(BufReader::new(f))
                    .map_err(|e| ExperimentError::Format(format!("{}: {e}", metrics.display())))?;
                results.push(r);
            } else {
                let msg = fs::read_to_string(&error).unwrap_or_else(|_| "missing run".into());
                failures.push(Failure {
                    mode: mode_name(mode).to_string(),
                    seed,
                    error: msg.trim().to_string(),
                });
            }
        }
    }
    let report = reduce(&spec, &results, failures);
    write_report(root, &report)?;
    Ok(report)
}

/// Run logs under `root` as `(fold directory, log)`, in path order.
pub fn find_logs(root: &Path) -> Result<Vec<(PathBuf, RunLog)>, ExperimentError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| ExperimentError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "log.jsonl") {
                let f = fs::File::open(&p).map_err(|e| ExperimentError::io(&p, e))?;
                let log = RunLog::read_jsonl(BufReader::new(f)).map_err(|e| ExperimentError::io(&p, e))?;
                out.push((dir.clone(), log));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
