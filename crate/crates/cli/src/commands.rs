//! Subcommand implementations. Each takes a validated [`RunConfig`] and
//! returns the main path it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use enginefault::dataset::{split, Part, Split, WindowDataset, SPLIT_FILE};
use enginefault::models::ModelKind;
use enginefault::models::{detection_latency, predict_run, Latency, Model, Normalizer};
use enginefault::preprocess::{class_dirs, preprocess_corpus, process_run, MANIFEST_FILE};
use enginefault::testbed_sim::generate_dataset;
use enginefault::train_eval::{
    fit, load_checkpoint, score_split, FitReport, METRICS_FILE, REPORT_FILE,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Result};

pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} not found at {} ({hint})",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Simulate the corpus into the corpus directory.
pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    let root = cfg.corpus_dir();
    let summary = generate_dataset(&cfg.corpus, &root, cfg.training.execution)?;
    cfg.echo(&root)?;
    log::info!("wrote {} runs to {}", summary.total_runs, root.display());
    Ok(root)
}

/// Turn the corpus into the window store.
pub fn preprocess(cfg: &RunConfig) -> Result<PathBuf> {
    let corpus = cfg.corpus_dir();
    require(&corpus, "corpus", "run `generate` first")?;
    let store = cfg.store_dir();
    let summary = preprocess_corpus(
        &class_dirs(&corpus)?,
        &cfg.preprocess,
        &store,
        cfg.training.execution,
    )?;
    cfg.echo(&store)?;
    log::info!(
        "{} runs ({} skipped) -> {} windows in {}",
        summary.runs,
        summary.skipped.len(),
        summary.windows,
        store.display()
    );
    Ok(store)
}

fn load_store(cfg: &RunConfig) -> Result<WindowDataset> {
    let store = cfg.store_dir();
    require(
        &store.join(MANIFEST_FILE),
        "window store",
        "run `preprocess` first",
    )?;
    let set = WindowDataset::load(&store)?;
    if set.window() != cfg.preprocess.window {
        return Err(CliError::Validation(vec![format!(
            "configuration error at `preprocess.window`: store at {} holds windows of {} steps, config says {}",
            store.display(),
            set.window(),
            cfg.preprocess.window
        )]));
    }
    Ok(set)
}

/// Train the configured model; outputs go to `<out>/<kind>/`.
pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let set = load_store(cfg)?;
    let dir = cfg.model_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    cfg.echo(&dir)?;
    let split = split(&set, cfg.split.ratios, cfg.split.seed)?;
    split.save(&dir)?;
    let normalizer = Normalizer::fit(&set, &split.train)?;
    let mut model = Model::new(cfg.model_config(), normalizer, cfg.training.init_seed)?;
    log::info!(
        "training {} ({} parameters) on {} windows",
        model.kind(),
        model.params().num_weights(),
        split.train.len()
    );
    let report = fit(&mut model, &set, &split, &cfg.training, &dir)?;
    log::info!(
        "best epoch {}: test window accuracy {:.4}",
        report.best_epoch,
        report.test_accuracy
    );
    Ok(dir)
}

fn split_for(cfg: &RunConfig, set: &WindowDataset, checkpoint: &Path) -> Result<Split> {
    let saved = checkpoint.parent().map(|p| p.join(SPLIT_FILE));
    match saved {
        Some(path) if path.exists() => Ok(Split::load(path.parent().unwrap())?),
        _ => Ok(split(set, cfg.split.ratios, cfg.split.seed)?),
    }
}

/// Score a checkpoint on one split and write `<checkpoint>/report_<part>.json`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, part: Part) -> Result<PathBuf> {
    require(checkpoint, "checkpoint", "run `train` first")?;
    let model = load_checkpoint(checkpoint)?;
    let set = load_store(cfg)?;
    let split = split_for(cfg, &set, checkpoint)?;
    let report = score_split(
        &model,
        &set,
        &split,
        part,
        cfg.training.aggregation,
        cfg.training.execution,
    )?;
    let name = serde_json::to_value(part)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    let path = checkpoint.join(format!("report_{name}.json"));
    report.save(&path)?;
    log::info!(
        "{name}: window accuracy {:.4}, step accuracy {:.4}, median latency {:?}",
        report.window_accuracy,
        report.step_accuracy,
        report.latency.median_steps
    );
    Ok(path)
}

#[derive(Debug, Serialize)]
struct Verdict {
    run: PathBuf,
    predicted_class: u8,
    true_class: u8,
    onset_step: Option<usize>,
    rule: String,
    latency: Option<Latency>,
    latency_steps: Option<i64>,
}

/// Per-step prediction for one raw run directory. Writes
/// `<out>/predict/<name>.csv` and `<name>.json`; returns the CSV path.
pub fn predict(cfg: &RunConfig, checkpoint: &Path, run: &Path) -> Result<PathBuf> {
    require(checkpoint, "checkpoint", "run `train` first")?;
    require(
        run,
        "run directory",
        "pass a directory produced by `generate`",
    )?;
    let model = load_checkpoint(checkpoint)?;
    let (frame, _, label) = process_run(run, &cfg.preprocess)?;
    let values: Vec<f32> = frame.values.iter().map(|&v| v as f32).collect();
    let trace = predict_run(
        &model,
        &values,
        cfg.preprocess.window,
        cfg.preprocess.stride,
        cfg.training.execution,
    )?;
    let rule = cfg.training.aggregation;
    let predicted_class = trace.verdict(rule)?;
    let latency = match frame.onset_step {
        Some(onset) if label != 0 => Some(detection_latency(&trace, onset, label, rule)?),
        _ => None,
    };

    let out = cfg.paths.out.join("predict");
    cfg.echo(&out)?;
    let name = run
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect::<Vec<_>>()
        .join("_");
    let csv_path = out.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let classes = trace.classes.len();
    let width = trace.probs.len() / classes.max(1);
    let mut header = vec![
        "step".to_string(),
        "time_s".into(),
        "label".into(),
        "pred".into(),
    ];
    header.extend((0..width).map(|c| format!("p{c}")));
    w.write_record(&header).map_err(|e| io_err(&csv_path, e))?;
    for t in 0..classes {
        let mut row = vec![
            t.to_string(),
            frame.times[t].to_string(),
            frame.labels[t].to_string(),
            trace.classes[t].to_string(),
        ];
        row.extend(
            trace.probs[t * width..(t + 1) * width]
                .iter()
                .map(|p| format!("{p:.6}")),
        );
        w.write_record(&row).map_err(|e| io_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;

    let verdict = Verdict {
        run: run.to_path_buf(),
        predicted_class,
        true_class: label,
        onset_step: frame.onset_step,
        rule: rule.to_string(),
        latency_steps: latency.and_then(|l| l.steps()),
        latency,
    };
    write_json(&out.join(format!("{name}.json")), &verdict)?;
    log::info!("{name}: predicted class {predicted_class}, true class {label}");
    Ok(csv_path)
}

#[derive(Debug, Serialize)]
struct ModelSummary {
    model: String,
    best_epoch: usize,
    test_window_accuracy: f64,
    test_step_accuracy: f64,
    mean_detection_latency: Option<f64>,
    median_detection_latency: Option<f64>,
}

/// Collect the training curves of every trained model under `<out>` into one
/// long-format CSV (`model,epoch,metric,value`) and a summary of test scores.
pub fn report(cfg: &RunConfig) -> Result<PathBuf> {
    let out = &cfg.paths.out;
    let curves_path = out.join(CURVES_FILE);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for kind in [ModelKind::Transformer, ModelKind::Rnn] {
        let dir = out.join(kind.to_string());
        let metrics = dir.join(METRICS_FILE);
        if !metrics.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&metrics).map_err(|e| io_err(&metrics, e))?;
        let header = r.headers().map_err(|e| io_err(&metrics, e))?.clone();
        for record in r.records() {
            let record = record.map_err(|e| io_err(&metrics, e))?;
            let epoch = &record[0];
            for (name, value) in header.iter().zip(record.iter()).skip(1) {
                if !value.is_empty() {
                    rows.push([
                        kind.to_string(),
                        epoch.to_string(),
                        name.to_string(),
                        value.to_string(),
                    ]);
                }
            }
        }
        if dir.join(REPORT_FILE).exists() {
            let fit = FitReport::load(&dir)?;
            summaries.push(ModelSummary {
                model: kind.to_string(),
                best_epoch: fit.best_epoch,
                test_window_accuracy: fit.test.window_accuracy,
                test_step_accuracy: fit.test.step_accuracy,
                mean_detection_latency: fit.test.latency.mean_steps,
                median_detection_latency: fit.test.latency.median_steps,
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "no training metrics under {} (run `train` first)",
            out.display()
        )));
    }
    let mut w = csv::Writer::from_path(&curves_path).map_err(|e| io_err(&curves_path, e))?;
    w.write_record(["model", "epoch", "metric", "value"])
        .map_err(|e| io_err(&curves_path, e))?;
    for row in &rows {
        w.write_record(row).map_err(|e| io_err(&curves_path, e))?;
    }
    w.flush().map_err(|e| io_err(&curves_path, e))?;
    write_json(&out.join(SUMMARY_FILE), &summaries)?;
    cfg.echo(out)?;
    for s in &summaries {
        log::info!(
            "{:<12} best epoch {:>3}  test window acc {:.4}  median latency {}",
            s.model,
            s.best_epoch,
            s.test_window_accuracy,
            s.median_detection_latency
                .map_or("n/a".to_string(), |m| format!("{m:.1} steps"))
        );
    }
    Ok(curves_path)
}
