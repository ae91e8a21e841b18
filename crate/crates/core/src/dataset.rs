//! Indexable window dataset over the preprocessed store, with run-level
//! stratified splitting and seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::stream;
use crate::preprocess::{read_manifest, Manifest, RunRecord, FEATURES_FILE, LABELS_FILE};
use crate::{NUM_CHANNELS, NUM_CLASSES};

pub const SPLIT_FILE: &str = "split.json";

/// Labeled windows loaded from a store directory.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    manifest: Manifest,
    features: Vec<f32>,
    step_labels: Vec<u8>,
}

impl WindowDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let fpath = dir.join(FEATURES_FILE);
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let features: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let lpath = dir.join(LABELS_FILE);
        let step_labels = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
        Self::from_parts(manifest, features, step_labels)
    }

    pub fn from_parts(
        manifest: Manifest,
        features: Vec<f32>,
        step_labels: Vec<u8>,
    ) -> Result<Self> {
        let n = manifest.num_windows;
        let w = manifest.window;
        if features.len() != n * w * NUM_CHANNELS {
            return Err(Error::Shape(format!(
                "feature store holds {} values, manifest implies {n}×{w}×{NUM_CHANNELS}",
                features.len()
            )));
        }
        if step_labels.len() != n * w {
            return Err(Error::Shape(format!(
                "label store holds {} entries, manifest implies {n}×{w}",
                step_labels.len()
            )));
        }
        if let Some(&bad) = step_labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        Ok(Self {
            manifest,
            features,
            step_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.num_windows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self) -> usize {
        self.manifest.window
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn check(&self, idx: usize) -> Result<()> {
        if idx < self.len() {
            Ok(())
        } else {
            Err(Error::Index {
                index: idx,
                len: self.len(),
            })
        }
    }

    /// The `idx`-th window (`w × 27`, row-major) and its label.
    pub fn get_sample(&self, idx: usize) -> Result<(&[f32], u8)> {
        self.check(idx)?;
        let stride = self.window() * NUM_CHANNELS;
        Ok((
            &self.features[idx * stride..(idx + 1) * stride],
            self.label(idx),
        ))
    }

    /// Per-step labels of window `idx`.
    pub fn step_labels(&self, idx: usize) -> Result<&[u8]> {
        self.check(idx)?;
        let w = self.window();
        Ok(&self.step_labels[idx * w..(idx + 1) * w])
    }

    fn label(&self, idx: usize) -> u8 {
        self.step_labels[(idx + 1) * self.window() - 1]
    }

    pub fn labels(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    /// The run a window came from and its start step within the run.
    pub fn origin(&self, idx: usize) -> Result<(&RunRecord, usize)> {
        self.check(idx)?;
        let o = self.manifest.windows[idx];
        Ok((&self.manifest.runs[o.run], o.start))
    }

    /// Window indices belonging to the given runs, in store order.
    pub fn windows_of_runs(&self, runs: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = runs
            .iter()
            .flat_map(|&r| {
                let rec = &self.manifest.runs[r];
                rec.first_window..rec.first_window + rec.num_windows
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Stack the given windows into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let w = self.window();
        let mut features = Vec::with_capacity(indices.len() * w * NUM_CHANNELS);
        let mut step_labels = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            let (x, _) = self.get_sample(i)?;
            features.extend_from_slice(x);
            step_labels.extend_from_slice(self.step_labels(i)?);
        }
        Ok(Batch {
            indices: indices.to_vec(),
            window: w,
            features,
            step_labels,
        })
    }
}

/// A stack of windows: `features` is `B × w × 27`, `step_labels` is `B × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub window: usize,
    pub features: Vec<f32>,
    pub step_labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sample(&self, b: usize) -> (&[f32], &[u8]) {
        let w = self.window;
        (
            &self.features[b * w * NUM_CHANNELS..(b + 1) * w * NUM_CHANNELS],
            &self.step_labels[b * w..(b + 1) * w],
        )
    }

    /// Window labels (last step of each window).
    pub fn labels(&self) -> Vec<u8> {
        (0..self.len())
            .map(|b| self.step_labels[(b + 1) * self.window - 1])
            .collect()
    }
}

/// Train/validation/test partition. `*_runs` index the manifest's runs; the
/// window lists are derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train_runs: Vec<usize>,
    pub val_runs: Vec<usize>,
    pub test_runs: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn part(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    pub fn runs(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train_runs,
            Part::Val => &self.val_runs,
            Part::Test => &self.test_runs,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SPLIT_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SPLIT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split.ratios",
            format!("must be positive and sum to 1, got {ratios:?}"),
        ));
    }
    Ok(())
}

/// Per-class counts for a three-way split of `n` items: train and validation
/// rounded, test gets the rest, and every part keeps at least one item.
pub fn stratum_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut train = (n as f64 * ratios[0]).round() as usize;
    let mut val = (n as f64 * ratios[1]).round() as usize;
    train = train.clamp(1, n.saturating_sub(2));
    val = val.clamp(1, n - train - 1);
    [train, val, n - train - val]
}

/// Stratified three-way split of item indices `0..labels.len()` by label.
/// Each class is shuffled with a seeded stream and cut by [`stratum_counts`].
pub fn stratified_split(labels: &[u8], ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    check_ratios(ratios)?;
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..NUM_CLASSES as u8 {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::Stratify(format!(
                "class {class} has {} items; at least 3 are needed for a three-way split",
                members.len()
            )));
        }
        members.shuffle(&mut stream(seed, &[0x5D11, class as u64]));
        let [a, b, _] = stratum_counts(members.len(), ratios);
        parts[0].extend_from_slice(&members[..a]);
        parts[1].extend_from_slice(&members[a..a + b]);
        parts[2].extend_from_slice(&members[a + b..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Split the dataset by run, stratified on each run's class, so overlapping
/// windows of one run never land in different parts.
pub fn split(set: &WindowDataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let run_labels: Vec<u8> = set.manifest.runs.iter().map(|r| r.label).collect();
    let [train_runs, val_runs, test_runs] = stratified_split(&run_labels, ratios, seed)?;
    Ok(Split {
        seed,
        ratios,
        train: set.windows_of_runs(&train_runs),
        val: set.windows_of_runs(&val_runs),
        test: set.windows_of_runs(&test_runs),
        train_runs,
        val_runs,
        test_runs,
    })
}

/// Cut `indices` into batches of `batch_size` (the last may be short),
/// optionally shuffled with a seeded stream.
pub fn batch_indices(
    indices: &[usize],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("training.batch_size", "must be at least 1"));
    }
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(&mut stream(seed, &[0xBA7C]));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterate over gathered batches of `indices`.
pub fn batches<'a>(
    set: &'a WindowDataset,
    indices: &[usize],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let plan = batch_indices(indices, batch_size, shuffle, seed)?;
    Ok(plan.into_iter().map(move |b| set.gather(&b)))
}
