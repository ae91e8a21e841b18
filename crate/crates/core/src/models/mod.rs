//! The encoder-decoder transformer classifier, the stacked-RNN baseline, input
//! standardization and per-step prediction scoring.

mod predict;
mod rnn;
mod transformer;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowDataset;
use crate::error::{Error, Result};
use crate::nn::{
    read_params, stream, write_params, ParamStore, Scalar, Tape, Tensor, TensorEntry, Var,
};
use crate::NUM_CHANNELS;

pub use predict::{
    aggregate_prediction, detection_latency, predict_run, stitch_plan, AggregationRule, Latency,
    PredictionTrace,
};
pub use rnn::RnnConfig;
pub use transformer::{positional_encoding, TransformerConfig};

use rnn::RnnLayout;
use transformer::TransformerLayout;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Rnn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Rnn => "rnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Rnn(RnnConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Transformer(_) => ModelKind::Transformer,
            ModelConfig::Rnn(_) => ModelKind::Rnn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Rnn(c) => c.validate(),
        }
    }

    /// Number of trainable weights, computed from the configuration alone.
    pub fn num_parameters(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.num_parameters(),
            ModelConfig::Rnn(c) => c.num_parameters(),
        }
    }
}

/// Per-channel z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-8;

impl Default for Normalizer {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; NUM_CHANNELS],
            std: vec![1.0; NUM_CHANNELS],
        }
    }

    /// Mean and population standard deviation of every channel over all rows
    /// of the given windows. Channels with (near) zero spread get std 1.
    pub fn fit(set: &WindowDataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Ok(Self::identity());
        }
        let mut sum = [0.0f64; NUM_CHANNELS];
        let mut sq = [0.0f64; NUM_CHANNELS];
        let mut rows = 0usize;
        for &i in indices {
            let (x, _) = set.get_sample(i)?;
            for row in x.chunks_exact(NUM_CHANNELS) {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
                rows += 1;
            }
        }
        let n = rows as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = (0..NUM_CHANNELS)
            .map(|c| {
                let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
                let s = var.sqrt();
                if s > MIN_STD {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != NUM_CHANNELS || self.std.len() != NUM_CHANNELS {
            return Err(Error::Shape(format!(
                "normalizer has {}/{} entries, expected {NUM_CHANNELS}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite())
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument(
                "normalizer statistics must be finite with std > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Transformer(TransformerLayout),
    Rnn(RnnLayout),
}

/// A classifier mapping `T × 27` windows to `T × 12` logits.
#[derive(Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    normalizer: Normalizer,
    layout: Layout,
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("weights", &self.params.num_weights())
            .finish()
    }
}

fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Layout)> {
    config.validate()?;
    let mut rng = stream(seed, &[0x1A17]);
    let mut params = ParamStore::new();
    let layout = match config {
        ModelConfig::Transformer(c) => {
            Layout::Transformer(TransformerLayout::build(c, &mut params, &mut rng))
        }
        ModelConfig::Rnn(c) => Layout::Rnn(RnnLayout::build(c, &mut params, &mut rng)),
    };
    Ok((params, layout))
}

impl<T: Scalar> Model<T> {
    /// Fresh model with Xavier-initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        normalizer.validate()?;
        let (params, layout) = build(&config, seed)?;
        Ok(Self {
            config,
            params,
            normalizer,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn positional(&self) -> bool {
        matches!(&self.config, ModelConfig::Transformer(c) if c.positional_encoding)
    }

    /// Standardize a raw `steps × 27` window (and add positional encodings
    /// when enabled) into a model input tensor.
    pub fn prepare_input(&self, raw: &[f32]) -> Result<Tensor<T>> {
        if raw.is_empty() || !raw.len().is_multiple_of(NUM_CHANNELS) {
            return Err(Error::Shape(format!(
                "input of {} values is not a non-empty multiple of {NUM_CHANNELS} columns",
                raw.len()
            )));
        }
        let steps = raw.len() / NUM_CHANNELS;
        let pe = if self.positional() {
            positional_encoding(steps, NUM_CHANNELS)
        } else {
            Vec::new()
        };
        let data = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % NUM_CHANNELS;
                let z = (v as f64 - self.normalizer.mean[c]) / self.normalizer.std[c];
                T::lit(z + pe.get(i).copied().unwrap_or(0.0))
            })
            .collect();
        Tensor::new(vec![steps, NUM_CHANNELS], data)
    }

    /// Logits for the prepared input `x` using this model's parameters.
    /// Passing an `rng` switches dropout to training mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        self.forward_with(&self.params, tape, x, rng)
    }

    /// Like [`Model::forward`] but reading weights from `params`, which must
    /// share this model's layout.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let (steps, cols) = tape.value(x).dims2()?;
        if steps == 0 || cols != NUM_CHANNELS {
            return Err(Error::Shape(format!(
                "model input must be T×{NUM_CHANNELS} with T ≥ 1, got {steps}×{cols}"
            )));
        }
        match (&self.layout, &self.config) {
            (Layout::Transformer(l), ModelConfig::Transformer(c)) => {
                l.forward(c, params, tape, x, rng)
            }
            (Layout::Rnn(l), ModelConfig::Rnn(_)) => l.forward(params, tape, x),
            _ => unreachable!("layout always matches config"),
        }
    }

    /// Encoder output only (transformer models).
    pub fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match (&self.layout, &self.config) {
            (Layout::Transformer(l), ModelConfig::Transformer(c)) => l.encode(
                c,
                &self.params,
                tape,
                x,
                None::<&mut rand_chacha::ChaCha8Rng>,
            ),
            _ => Err(Error::InvalidArgument(
                "encode is only defined for transformer models".into(),
            )),
        }
    }

    /// Evaluation-mode logits (`steps × 12`) for a raw window.
    pub fn logits(&self, raw: &[f32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(self.prepare_input(raw)?);
        let out = self.forward(&mut tape, x, None::<&mut rand_chacha::ChaCha8Rng>)?;
        Ok(tape.value(out).clone())
    }

    /// Per-step cross-entropy for one raw window, on a fresh tape.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        raw: &[f32],
        step_labels: &[u8],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let x = tape.input(self.prepare_input(raw)?);
        let logits = self.forward(tape, x, rng)?;
        let targets: Vec<usize> = step_labels.iter().map(|&l| l as usize).collect();
        tape.cross_entropy(logits, &targets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    model: ModelConfig,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
}

impl Model<f32> {
    /// Write `checkpoint.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = write_params(&self.params, dir)?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            model: self.config.clone(),
            normalizer: self.normalizer.clone(),
            tensors,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta: CheckpointMeta = serde_json::from_value(value)
            .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
        let mut model = Model::new(meta.model, meta.normalizer, 0)?;
        read_params(&mut model.params, &meta.tensors, dir)?;
        Ok(model)
    }
}

/// Softmax over each row of `logits` in 64-bit.
pub fn row_probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let cols = logits.shape().last().copied().unwrap_or(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(cols) {
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    out
}

/// Index of the largest value (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
