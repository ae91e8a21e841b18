//! Binary window store: `features.bin` (little-endian f32, `n × w × 27`),
//! `labels.bin` (one byte per step, `n × w`) and a JSON manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{column_names, PreprocessConfig, WindowSet};
use crate::error::{Error, Result};
use crate::{NUM_CHANNELS, NUM_CLASSES};

pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub label: u8,
    pub onset_step: Option<usize>,
    pub first_window: usize,
    pub num_windows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    /// Index into [`Manifest::runs`].
    pub run: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seq_len: usize,
    pub window: usize,
    pub stride: usize,
    pub num_channels: usize,
    pub columns: Vec<String>,
    pub num_windows: usize,
    /// Window-label counts per class.
    pub class_histogram: Vec<usize>,
    pub runs: Vec<RunRecord>,
    pub skipped: Vec<String>,
    pub windows: Vec<WindowOrigin>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::InvalidArgument(format!("manifest: {m}"));
        if self.version != STORE_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        if self.num_channels != NUM_CHANNELS || self.columns != column_names() {
            return Err(bad("column layout differs from the canonical order".into()));
        }
        if self.windows.len() != self.num_windows || self.class_histogram.len() != NUM_CLASSES {
            return Err(bad("window or histogram counts inconsistent".into()));
        }
        if self.windows.iter().any(|w| w.run >= self.runs.len()) {
            return Err(bad("window refers to a missing run".into()));
        }
        Ok(())
    }
}

/// Write all windows of `runs` (already in canonical order) into `dir`.
pub fn write_store(
    dir: &Path,
    cfg: &PreprocessConfig,
    runs: &[(String, u8, Option<usize>, WindowSet)],
    skipped: &[String],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(runs.len());
    let mut windows = Vec::new();
    let mut histogram = vec![0; NUM_CLASSES];

    let fpath = dir.join(FEATURES_FILE);
    let lpath = dir.join(LABELS_FILE);
    let mut features = BufWriter::new(fs::File::create(&fpath).map_err(|e| Error::io(&fpath, e))?);
    let mut labels = BufWriter::new(fs::File::create(&lpath).map_err(|e| Error::io(&lpath, e))?);
    for (run_idx, (id, label, onset_step, set)) in runs.iter().enumerate() {
        if set.window != cfg.window {
            return Err(Error::Shape(format!(
                "run {id} has window {} not {}",
                set.window, cfg.window
            )));
        }
        records.push(RunRecord {
            id: id.clone(),
            label: *label,
            onset_step: *onset_step,
            first_window: windows.len(),
            num_windows: set.len(),
        });
        for (i, &start) in set.starts.iter().enumerate() {
            windows.push(WindowOrigin {
                run: run_idx,
                start,
            });
            histogram[set.label(i) as usize] += 1;
        }
        for v in &set.features {
            features
                .write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&fpath, e))?;
        }
        labels
            .write_all(&set.step_labels)
            .map_err(|e| Error::io(&lpath, e))?;
    }
    features.flush().map_err(|e| Error::io(&fpath, e))?;
    labels.flush().map_err(|e| Error::io(&lpath, e))?;

    let manifest = Manifest {
        version: STORE_VERSION,
        seq_len: cfg.seq_len,
        window: cfg.window,
        stride: cfg.stride,
        num_channels: NUM_CHANNELS,
        columns: column_names(),
        num_windows: windows.len(),
        class_histogram: histogram,
        runs: records,
        skipped: skipped.to_vec(),
        windows,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    manifest.validate()?;
    Ok(manifest)
}
