//! Line-delimited JSON run log.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::metrics::EpochWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0-based index over training batches.
    pub step: u64,
    pub epoch: usize,
    pub ids: Vec<u64>,
    /// Continuous rescaler output per sample (1 for unweighted training, the
    /// keep flag for AGRA).
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    /// Present on the last traversal before a rescaler update.
    pub meta_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_weight: f64,
    pub val_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Stop { epoch: usize, best_epoch: usize, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    /// Per epoch, each sample's mean logged weight, ids ascending.
    pub fn epoch_weights(&self) -> Vec<EpochWeights> {
        let mut by_epoch: BTreeMap<usize, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
        for s in self.steps() {
            let e = by_epoch.entry(s.epoch).or_default();
            for (&id, &w) in s.ids.iter().zip(&s.weights) {
                let slot = e.entry(id).or_insert((0.0, 0));
                slot.0 += w;
                slot.1 += 1;
            }
        }
        by_epoch
            .into_iter()
            .map(|(epoch, m)| {
                let (ids, weights) = m.into_iter().map(|(id, (s, n))| (id, s / n as f64)).unzip();
                EpochWeights { epoch, ids, weights }
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut records = Vec::new();
        for (k, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", k + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}
