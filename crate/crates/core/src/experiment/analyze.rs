//! Post-hoc rescaler analyses over finished run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{rescaler_roc, weight_analyses, DOWNSCALE_FRACTION};

use super::run::find_logs;
use super::ExperimentError;

/// Macro averages over the runs of one mode, indexed by epoch position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    pub mode: String,
    pub runs: usize,
    pub auc_by_epoch: Vec<Option<f64>>,
    pub mean_clean_by_epoch: Vec<Option<f64>>,
    pub mean_noisy_by_epoch: Vec<Option<f64>>,
    pub gap_by_epoch: Vec<Option<f64>>,
    /// Mean earliest filtering epoch of noisy and clean samples that were
    /// ever downscaled.
    pub earliest_noisy: Option<f64>,
    pub earliest_clean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    /// Always `"macro"`: every run counts once, whatever its size.
    pub aggregation: String,
    pub modes: Vec<ModeAnalysis>,
}

fn read_noise(path: &Path) -> Result<BTreeMap<u64, bool>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let parsed = line
            .split_once(',')
            .and_then(|(id, m)| Some((id.parse::<u64>().ok()?, m == "1")));
        let (id, m) = parsed.ok_or_else(|| ExperimentError::Format(format!("{}: {line:?}", path.display())))?;
        out.insert(id, m);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Default)]
struct Acc {
    runs: usize,
    auc: Vec<Vec<Option<f64>>>,
    clean: Vec<Vec<Option<f64>>>,
    noisy: Vec<Vec<Option<f64>>>,
    gap: Vec<Vec<Option<f64>>>,
    earliest_noisy: Vec<f64>,
    earliest_clean: Vec<f64>,
}

fn push_at(v: &mut Vec<Vec<Option<f64>>>, k: usize, x: Option<f64>) {
    if v.len() <= k {
        v.resize(k + 1, Vec::new());
    }
    v[k].push(x);
}

/// Writes `roc.csv`, `weights_by_epoch.csv` and `filter_timing.csv` next to
/// every run log under `root`, then `analysis.json` at `root`. Runs without
/// recorded weights are skipped.
pub fn analyze(root: &Path) -> Result<Analysis, ExperimentError> {
    let mut by_mode: BTreeMap<String, Acc> = BTreeMap::new();
    for (dir, log) in find_logs(root)? {
        let epochs = log.epoch_weights();
        if epochs.is_empty() {
            continue;
        }
        let noise_path = dir.join("noise.csv");
        let noise = if noise_path.exists() {
            Some(read_noise(&noise_path)?)
        } else {
            None
        };
        let mode = dir
            .ancestors()
            .nth(2)
            .and_then(|p| p.file_name())
            .map_or_else(|| "unknown".to_string(), |n| n.to_string_lossy().into_owned());
        let acc = by_mode.entry(mode).or_default();
        acc.runs += 1;

        let mut roc = String::from("epoch,fpr,tpr,threshold\n");
        for (k, e) in epochs.iter().enumerate() {
            let r = match &noise {
                Some(n) => {
                    let mask: Vec<bool> = e.ids.iter().map(|id| n.get(id).copied().unwrap_or(false)).collect();
                    rescaler_roc(&e.weights, &mask)?
                }
                None => None,
            };
            if let Some(r) = &r {
                for (i, (fpr, tpr)) in r.points.iter().enumerate() {
                    let t = if i == 0 { String::new() } else { format!("{:?}", r.thresholds[i - 1]) };
                    let _ = writeln!(roc, "{},{fpr:?},{tpr:?},{t}", e.epoch);
                }
            }
            push_at(&mut acc.auc, k, r.map(|r| r.auc));
        }
        fs::write(dir.join("roc.csv"), roc).map_err(|e| ExperimentError::io(&dir, e))?;

        let wa = weight_analyses(&epochs, noise.as_ref(), DOWNSCALE_FRACTION);
        let mut prog = String::from("epoch,mean_all,mean_clean,mean_noisy,threshold\n");
        for (k, row) in wa.progression.iter().enumerate() {
            let _ = writeln!(
                prog,
                "{},{:?},{},{},{:?}",
                row.epoch,
                row.mean_all,
                opt(row.mean_clean),
                opt(row.mean_noisy),
                row.threshold
            );
            push_at(&mut acc.clean, k, row.mean_clean);
            push_at(&mut acc.noisy, k, row.mean_noisy);
            push_at(&mut acc.gap, k, row.gap());
        }
        fs::write(dir.join("weights_by_epoch.csv"), prog).map_err(|e| ExperimentError::io(&dir, e))?;

        let mut timing = String::from("id,noisy,earliest,latest\n");
        for t in &wa.timing {
            let flag = t.noisy.map_or("", |m| if m { "1" } else { "0" });
            let show = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
            let _ = writeln!(timing, "{},{flag},{},{}", t.id, show(t.earliest), show(t.latest));
            if let (Some(m), Some(e)) = (t.noisy, t.earliest) {
                if m {
                    acc.earliest_noisy.push(e as f64);
                } else {
                    acc.earliest_clean.push(e as f64);
                }
            }
        }
        fs::write(dir.join("filter_timing.csv"), timing).map_err(|e| ExperimentError::io(&dir, e))?;
    }

    let avg = |v: &Vec<Vec<Option<f64>>>| v.iter().map(|xs| mean_opt(xs.iter().copied())).collect();
    let modes = by_mode
        .into_iter()
        .map(|(mode, a)| ModeAnalysis {
            mode,
            runs: a.runs,
            auc_by_epoch: avg(&a.auc),
            mean_clean_by_epoch: avg(&a.clean),
            mean_noisy_by_epoch: avg(&a.noisy),
            gap_by_epoch: avg(&a.gap),
            earliest_noisy: mean_opt(a.earliest_noisy.iter().map(|&x| Some(x))),
            earliest_clean: mean_opt(a.earliest_clean.iter().map(|&x| Some(x))),
        })
        .collect();
    let analysis = Analysis {
        aggregation: "macro".into(),
        modes,
    };
    let path = root.join("analysis.json");
    let text = serde_json::to_string_pretty(&analysis).map_err(|e| ExperimentError::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| ExperimentError::io(&path, e))?;
    Ok(analysis)
}
