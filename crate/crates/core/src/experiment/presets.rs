//! Named reproduction presets.
//!
//! `<dataset>-<noise percent>[-<variant>]` with dataset `sms`, `youtube` or
//! `synthetic`, noise percent 0 to 40 in steps of 10, and variant one of
//! [`VARIANTS`]. Without a variant the preset runs STORM paired with
//! unweighted training.

use super::spec::{DatasetKind, ExperimentSpec, MetricKind, SplitKind};
use super::ExperimentError;
use crate::trainer::Mode;

pub const DATASETS: [&str; 3] = ["sms", "youtube", "synthetic"];
pub const NOISE_LEVELS: [u32; 5] = [0, 10, 20, 30, 40];
pub const VARIANTS: [&str; 11] = [
    "none",
    "agra",
    "binary",
    "inner2",
    "passes10",
    "no-class-sep",
    "loss-only",
    "no-meta-learning",
    "no-meta-rescaling",
    "clean-val",
    "storm",
];

/// All preset names.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for d in DATASETS {
        for n in NOISE_LEVELS {
            out.push(format!("{d}-{n}"));
            for v in VARIANTS {
                out.push(format!("{d}-{n}-{v}"));
            }
        }
    }
    out
}

fn base(dataset: &str) -> ExperimentSpec {
    let mut s = ExperimentSpec::default();
    let d = &mut s.dataset;
    match dataset {
        "sms" => {
            // tab-separated "label<TAB>message" lines without a header
            d.kind = DatasetKind::Delimited;
            d.path = "SMSSpamCollection".into();
            d.separator = b'\t';
            d.header = false;
            d.quoting = false;
            d.input_column = "1".into();
            d.label_column = "0".into();
            s.metric = MetricKind::F1;
            s.positive_class = Some("spam".into());
        }
        "youtube" => {
            d.kind = DatasetKind::Delimited;
            d.path = "youtube.csv".into();
            d.input_column = "CONTENT".into();
            d.label_column = "CLASS".into();
            s.metric = MetricKind::Accuracy;
        }
        _ => {
            d.kind = DatasetKind::Synthetic;
            s.seeds = (1..=5).collect();
        }
    }
    if d.kind != DatasetKind::Synthetic {
        d.split = SplitKind::Fractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
    }
    s
}

pub fn preset(name: &str) -> Result<ExperimentSpec, ExperimentError> {
    let unknown = || ExperimentError::UnknownPreset(name.to_string());
    let mut parts = name.splitn(3, '-');
    let dataset = parts.next().filter(|d| DATASETS.contains(d)).ok_or_else(unknown)?;
    let noise: u32 = parts
        .next()
        .and_then(|n| n.parse().ok())
        .filter(|n| NOISE_LEVELS.contains(n))
        .ok_or_else(unknown)?;
    let variant = parts.next();
    let mut s = base(dataset);
    s.name = name.to_string();
    s.preset = Some(name.to_string());
    s.noise_rate = f64::from(noise) / 100.0;
    let t = &mut s.trainer;
    match variant {
        None => s.baseline = Some(Mode::None),
        Some("storm") => {}
        Some("none") => t.mode = Mode::None,
        Some("agra") => t.mode = Mode::Agra,
        Some("binary") => t.binary_mode = true,
        Some("inner2") => t.inner_loop_count = 2,
        Some("passes10") => t.passes = 10,
        Some("no-class-sep") => t.class_separation = false,
        Some("loss-only") => t.loss_only_features = true,
        Some("no-meta-learning") => t.use_meta_learning = false,
        Some("no-meta-rescaling") => {
            t.rescale_meta_loss = false;
            t.use_outer_grad = false;
        }
        Some("clean-val") => {
            t.clean_validation_source = true;
            t.rescale_meta_loss = false;
            t.use_outer_grad = false;
        }
        Some(_) => return Err(unknown()),
    }
    Ok(s)
}
