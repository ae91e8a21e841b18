//! Training epochs, evaluation, the multi-epoch fit loop with metrics logging,
//! and checkpoints.

mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, Split, WindowDataset};
use crate::error::{Error, Result};
use crate::models::{argmax, row_probabilities, AggregationRule, Model};
use crate::nn::{derive_seed, stream, Adam, Gradients, Scalar, Tape, Tensor, Var};
use crate::par::{self, Execution};
use crate::NUM_CLASSES;

pub use report::{
    confusion_accuracy, latency_summary, run_trace, score_split, FitReport, HistogramBin,
    LatencySummary, RunLatency, SplitReport, REPORT_FILE,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over all epochs.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_schedule: LrSchedule,
    /// Stop after this many epochs without validation improvement.
    pub early_stopping_patience: Option<usize>,
    /// Seeds for weight init and for shuffling / dropout.
    pub init_seed: u64,
    pub shuffle_seed: u64,
    /// Rule for run-level verdicts and detection latency in the report.
    pub aggregation: AggregationRule,
    /// Fill the `seconds` column of `metrics.csv`. Off by default so that
    /// identical runs write identical files.
    pub log_wall_time: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = Adam::default();
        Self {
            epochs: 20,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lr_schedule: LrSchedule::Constant,
            early_stopping_patience: None,
            init_seed: 1,
            shuffle_seed: 2,
            aggregation: AggregationRule::FirstPersistent(3),
            log_wall_time: false,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "training.lr",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("training.beta1", "betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("training.eps", "must be positive"));
        }
        if self.early_stopping_patience == Some(0) {
            return Err(Error::config(
                "training.early_stopping_patience",
                "must be at least 1",
            ));
        }
        self.aggregation
            .validated()
            .map_err(|e| Error::config("training.aggregation", e.to_string()))?;
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: 0,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                0.5 * self.lr
                    * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

/// Correct and total per-step predictions for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Result of one training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Mean per-window loss over the epoch.
    pub loss: f64,
    /// Per-step accuracy.
    pub accuracy: f64,
    pub batches: Vec<Tally>,
}

fn step_correct<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> usize {
    let probs = row_probabilities(logits);
    probs
        .chunks(NUM_CLASSES)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l as usize)
        .count()
}

/// How many samples are differentiated at once before their gradients are
/// folded in; bounds peak memory for large models.
const GRAD_CHUNK: usize = 8;

/// One pass over `batches`: per batch zero the gradients, run forward and
/// backward on every window, average and take an optimizer step. Dropout
/// masks come from streams keyed by `(seed, batch, position)`.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Adam,
    set: &WindowDataset,
    batches: &[Vec<usize>],
    seed: u64,
    exec: Execution,
) -> Result<EpochStats> {
    let mut loss_sum = 0.0;
    let mut windows = 0usize;
    let mut tallies = Vec::with_capacity(batches.len());
    for (b, batch) in batches.iter().enumerate() {
        model.params_mut().zero_grad();
        let mut batch_loss = 0.0;
        let mut tally = Tally::default();
        for (c, chunk) in batch.chunks(GRAD_CHUNK).enumerate() {
            let model_ref = &*model;
            let results = par::map_range(
                exec,
                chunk.len(),
                |k| -> Result<(f64, usize, usize, Gradients<T>)> {
                    let (x, _) = set.get_sample(chunk[k])?;
                    let labels = set.step_labels(chunk[k])?;
                    let mut rng = stream(seed, &[b as u64, (c * GRAD_CHUNK + k) as u64]);
                    let mut tape = Tape::new();
                    let (logits, loss) =
                        forward_loss(model_ref, &mut tape, x, labels, Some(&mut rng))?;
                    let correct = step_correct(tape.value(logits), labels);
                    let value = tape.value(loss).data()[0].as_f64();
                    let grads = tape.backward(loss)?;
                    Ok((value, correct, labels.len(), grads))
                },
            );
            for r in results {
                let (value, correct, total, grads) = r?;
                batch_loss += value;
                tally.correct += correct;
                tally.total += total;
                model.params_mut().accumulate(&grads);
            }
        }
        let scale = T::lit(1.0 / batch.len() as f64);
        for p in model.params_mut().iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * scale);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: b,
                grad_norm: model.params().grad_norm(),
            });
        }
        optimizer.step(model.params_mut());
        loss_sum += batch_loss;
        windows += batch.len();
        tallies.push(tally);
    }
    let total = tallies.iter().fold(Tally::default(), |a, t| Tally {
        correct: a.correct + t.correct,
        total: a.total + t.total,
    });
    Ok(EpochStats {
        loss: if windows == 0 {
            0.0
        } else {
            loss_sum / windows as f64
        },
        accuracy: total.accuracy(),
        batches: tallies,
    })
}

fn forward_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    x: &[f32],
    labels: &[u8],
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let xv = tape.input(model.prepare_input(x)?);
    let logits = model.forward(tape, xv, rng)?;
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok((logits, loss))
}

/// Evaluation-mode statistics over a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    /// Per-step accuracy.
    pub step_accuracy: f64,
    /// Window accuracy with the verdict taken at the window's last step.
    pub window_accuracy: f64,
    /// `confusion[true][predicted]` over windows (last-step verdict).
    pub confusion: Vec<Vec<usize>>,
    pub windows: usize,
}

/// Loss and accuracies of `model` on `indices` without touching parameters.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    set: &WindowDataset,
    indices: &[usize],
    exec: Execution,
) -> Result<EvalStats> {
    let results = par::map(exec, indices, |&i| -> Result<(f64, usize, usize, u8, u8)> {
        let (x, label) = set.get_sample(i)?;
        let labels = set.step_labels(i)?;
        let mut tape = Tape::new();
        let (logits, loss) = forward_loss(model, &mut tape, x, labels, None)?;
        let value = tape.value(loss).data()[0].as_f64();
        let probs = row_probabilities(tape.value(logits));
        let correct = probs
            .chunks(NUM_CLASSES)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l as usize)
            .count();
        let last = argmax(&probs[probs.len() - NUM_CLASSES..]) as u8;
        Ok((value, correct, labels.len(), label, last))
    });
    let mut loss = 0.0;
    let mut tally = Tally::default();
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for r in results {
        let (value, correct, total, label, pred) = r?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: 0,
                grad_norm: f64::NAN,
            });
        }
        loss += value;
        tally.correct += correct;
        tally.total += total;
        confusion[label as usize][pred as usize] += 1;
    }
    let n = indices.len();
    Ok(EvalStats {
        loss: if n == 0 { 0.0 } else { loss / n as f64 },
        step_accuracy: tally.accuracy(),
        window_accuracy: confusion_accuracy(&confusion),
        confusion,
        windows: n,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

impl EpochMetrics {
    fn csv_row(&self, with_time: bool) -> String {
        let secs = if with_time {
            format!("{:.3}", self.wall_seconds)
        } else {
            String::new()
        };
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_accuracy,
            self.val_loss,
            self.val_accuracy,
            secs
        )
    }
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    model.save(dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    Model::load(dir)
}

/// Seed for the shuffle and dropout streams of `epoch`.
pub fn epoch_seed(cfg: &TrainConfig, epoch: usize) -> u64 {
    derive_seed(cfg.shuffle_seed, &[epoch as u64])
}

/// Train for `cfg.epochs` epochs, logging each to `out/metrics.csv`, keeping
/// the best-validation weights in `out/best`, then score the test split and
/// write `out/report.json`.
pub fn fit(
    model: &mut Model<f32>,
    set: &WindowDataset,
    split: &Split,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<FitReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics_file =
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics_file, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let mut optimizer = cfg.optimizer();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    let best_dir = out.join(BEST_DIR);
    let monitor_val = !split.val.is_empty();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let seed = epoch_seed(cfg, epoch);
        optimizer.lr = cfg.lr_at(epoch - 1);
        let plan = batch_indices(&split.train, cfg.batch_size, true, seed)?;
        let train = train_epoch(model, &mut optimizer, set, &plan, seed, cfg.execution)?;
        let val = evaluate(model, set, &split.val, cfg.execution)?;
        let m = EpochMetrics {
            epoch,
            train_loss: train.loss,
            train_accuracy: train.accuracy,
            val_loss: val.loss,
            val_accuracy: val.step_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(metrics_file, "{}", m.csv_row(cfg.log_wall_time))
            .map_err(|e| Error::io(&metrics_path, e))?;
        metrics_file
            .flush()
            .map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4} ({:.1}s)",
            m.train_loss,
            m.train_accuracy,
            m.val_loss,
            m.val_accuracy,
            m.wall_seconds
        );
        let score = if monitor_val {
            m.val_loss
        } else {
            m.train_loss
        };
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, epoch));
            model.save(&best_dir)?;
        }
        epochs.push(m);
        if let (Some(patience), Some((_, best_epoch))) = (cfg.early_stopping_patience, best) {
            if epoch - best_epoch >= patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    model.save(&out.join(LAST_DIR))?;
    let best_model = Model::load(&best_dir)?;
    let best_epoch = best.map_or(0, |(_, e)| e);
    let report = FitReport::build(
        &best_model,
        set,
        split,
        cfg,
        epochs,
        best_epoch,
        best_dir.clone(),
    )?;
    report.save(out)?;
    *model = best_model;
    Ok(report)
}

/// Paths written by [`fit`].
pub fn fit_outputs(out: &Path) -> [PathBuf; 3] {
    [
        out.join(METRICS_FILE),
        out.join(BEST_DIR),
        out.join(REPORT_FILE),
    ]
}
