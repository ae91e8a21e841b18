//! Test-split scoring: confusion matrix, window and run verdicts, and
//! detection latency, collected into `report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, EpochMetrics, EvalStats, TrainConfig};
use crate::dataset::{Part, Split, WindowDataset};
use crate::error::{Error, Result};
use crate::models::{
    aggregate_prediction, detection_latency, row_probabilities, AggregationRule, Latency, Model,
    PredictionTrace,
};
use crate::nn::Scalar;
use crate::par::{self, Execution};
use crate::NUM_CLASSES;

pub const REPORT_FILE: &str = "report.json";

/// Trace of the diagonal over the total.
pub fn confusion_accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let diag: usize = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    if total == 0 {
        0.0
    } else {
        diag as f64 / total as f64
    }
}

/// Per-step trace over a stored run, stitched from its windows: the first
/// window supplies all its steps, each later one its last `stride` steps.
pub fn run_trace<T: Scalar>(
    model: &Model<T>,
    set: &WindowDataset,
    run: usize,
) -> Result<PredictionTrace> {
    let manifest = set.manifest();
    let rec = manifest.runs.get(run).ok_or(Error::Index {
        index: run,
        len: manifest.runs.len(),
    })?;
    let (w, s) = (manifest.window, manifest.stride);
    let mut probs = Vec::new();
    for k in 0..rec.num_windows {
        let (x, _) = set.get_sample(rec.first_window + k)?;
        let p = row_probabilities(&model.logits(x)?);
        let from = if k == 0 { 0 } else { w - s };
        probs.extend_from_slice(&p[from * NUM_CLASSES..]);
    }
    PredictionTrace::from_probs(probs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLatency {
    pub run: String,
    pub class: u8,
    pub onset_step: usize,
    pub latency: Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub from: usize,
    /// Exclusive upper edge; `None` for the open last bin.
    pub to: Option<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub rule: AggregationRule,
    pub faulty_runs: usize,
    pub detected: usize,
    pub false_early: usize,
    pub not_detected: usize,
    pub mean_steps: Option<f64>,
    pub median_steps: Option<f64>,
    pub histogram: Vec<HistogramBin>,
    pub runs: Vec<RunLatency>,
}

const LATENCY_BIN: usize = 8;
const LATENCY_BINS: usize = 8;

fn median(sorted: &[usize]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2] as f64),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0),
    }
}

pub(super) fn summarize_latencies(rule: AggregationRule, runs: Vec<RunLatency>) -> LatencySummary {
    let mut detected: Vec<usize> = runs
        .iter()
        .filter_map(|r| match r.latency {
            Latency::Detected(s) => Some(s),
            _ => None,
        })
        .collect();
    detected.sort_unstable();
    let mut histogram: Vec<HistogramBin> = (0..LATENCY_BINS)
        .map(|i| HistogramBin {
            from: i * LATENCY_BIN,
            to: Some((i + 1) * LATENCY_BIN),
            count: 0,
        })
        .collect();
    histogram.push(HistogramBin {
        from: LATENCY_BIN * LATENCY_BINS,
        to: None,
        count: 0,
    });
    for &d in &detected {
        histogram[(d / LATENCY_BIN).min(LATENCY_BINS)].count += 1;
    }
    let count = |f: fn(&Latency) -> bool| runs.iter().filter(|r| f(&r.latency)).count();
    LatencySummary {
        rule,
        faulty_runs: runs.len(),
        detected: detected.len(),
        false_early: count(|l| matches!(l, Latency::FalseEarly(_))),
        not_detected: count(|l| matches!(l, Latency::NotDetected)),
        mean_steps: (!detected.is_empty())
            .then(|| detected.iter().sum::<usize>() as f64 / detected.len() as f64),
        median_steps: median(&detected),
        histogram,
        runs,
    }
}

/// Detection latency over the faulty runs among `runs`.
pub fn latency_summary<T: Scalar>(
    model: &Model<T>,
    set: &WindowDataset,
    runs: &[usize],
    rule: AggregationRule,
    exec: Execution,
) -> Result<LatencySummary> {
    let faulty: Vec<usize> = runs
        .iter()
        .copied()
        .filter(|&r| {
            set.manifest().runs[r].label > 0 && set.manifest().runs[r].onset_step.is_some()
        })
        .collect();
    let results = par::map(exec, &faulty, |&r| -> Result<Option<RunLatency>> {
        let rec = &set.manifest().runs[r];
        let onset = rec.onset_step.expect("filtered");
        let trace = run_trace(model, set, r)?;
        if onset >= trace.len() {
            return Ok(None);
        }
        Ok(Some(RunLatency {
            run: rec.id.clone(),
            class: rec.label,
            onset_step: onset,
            latency: detection_latency(&trace, onset, rec.label, rule)?,
        }))
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(summarize_latencies(rule, out))
}

/// Scores of one checkpoint on one split part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub part: Part,
    pub windows: usize,
    pub loss: f64,
    /// Window-level accuracy (verdict at each window's last step).
    pub window_accuracy: f64,
    /// Per-step accuracy.
    pub step_accuracy: f64,
    /// `confusion[true][predicted]` over windows.
    pub confusion: Vec<Vec<usize>>,
    /// Window accuracy when each window's per-step classes are reduced by
    /// each aggregation rule.
    pub window_accuracy_by_rule: BTreeMap<String, f64>,
    /// Run accuracy with the verdict taken over the whole stitched run trace.
    pub run_accuracy_by_rule: BTreeMap<String, f64>,
    pub latency: LatencySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    /// Window-level test accuracy, equal to `test.window_accuracy`.
    pub test_accuracy: f64,
    pub mean_detection_latency: Option<f64>,
    pub test: SplitReport,
}

fn rules(extra: AggregationRule) -> Vec<AggregationRule> {
    let mut r = vec![
        AggregationRule::LastStep,
        AggregationRule::Majority,
        AggregationRule::FirstPersistent(3),
    ];
    if !r.contains(&extra) {
        r.push(extra);
    }
    r
}

/// Accuracy of each rule's verdicts over `(trace, label)` pairs.
fn accuracy_by_rule(
    items: &[(PredictionTrace, u8)],
    rules: &[AggregationRule],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for &rule in rules {
        let mut correct = 0;
        for (trace, label) in items {
            if aggregate_prediction(trace, rule)? == *label {
                correct += 1;
            }
        }
        let acc = if items.is_empty() {
            0.0
        } else {
            correct as f64 / items.len() as f64
        };
        out.insert(rule.to_string(), acc);
    }
    Ok(out)
}

/// Score `model` on one part of `split`.
pub fn score_split(
    model: &Model<f32>,
    set: &WindowDataset,
    split: &Split,
    part: Part,
    rule: AggregationRule,
    exec: Execution,
) -> Result<SplitReport> {
    let indices = split.part(part);
    let stats: EvalStats = evaluate(model, set, indices, exec)?;
    let rules = rules(rule);
    let windows = par::map(exec, indices, |&i| -> Result<(PredictionTrace, u8)> {
        let (x, label) = set.get_sample(i)?;
        Ok((
            PredictionTrace::from_probs(row_probabilities(&model.logits(x)?))?,
            label,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let part_runs = split.runs(part);
    let runs = par::map(exec, part_runs, |&r| -> Result<(PredictionTrace, u8)> {
        Ok((run_trace(model, set, r)?, set.manifest().runs[r].label))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SplitReport {
        part,
        windows: stats.windows,
        loss: stats.loss,
        window_accuracy: stats.window_accuracy,
        step_accuracy: stats.step_accuracy,
        confusion: stats.confusion,
        window_accuracy_by_rule: accuracy_by_rule(&windows, &rules)?,
        run_accuracy_by_rule: accuracy_by_rule(&runs, &rules)?,
        latency: latency_summary(model, set, part_runs, rule, exec)?,
    })
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<S: serde::de::DeserializeOwned>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl SplitReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

impl FitReport {
    pub(super) fn build(
        model: &Model<f32>,
        set: &WindowDataset,
        split: &Split,
        cfg: &TrainConfig,
        epochs: Vec<EpochMetrics>,
        best_epoch: usize,
        best_checkpoint: PathBuf,
    ) -> Result<Self> {
        let test = score_split(
            model,
            set,
            split,
            Part::Test,
            cfg.aggregation,
            cfg.execution,
        )?;
        Ok(Self {
            model: model.kind().to_string(),
            epochs,
            best_epoch,
            best_checkpoint,
            test_accuracy: test.window_accuracy,
            mean_detection_latency: test.latency.mean_steps,
            test,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(self, &dir.join(REPORT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(REPORT_FILE))
    }
}
