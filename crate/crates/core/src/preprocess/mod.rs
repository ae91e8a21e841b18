//! Run directories to fixed-length labeled windows: missing-value repair,
//! resampling onto a common grid, merging into 27 columns, sliding windows and
//! the binary window store.

mod store;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::testbed_sim::{
    read_table, RunMeta, Table, INPUT_CHANNELS, META_FILE, OMEGA_CHANNEL, OUTPUT_CHANNELS,
    STATE_CHANNELS, TABLE_FILES, TORQUE_CHANNEL,
};
use crate::{NUM_CHANNELS, NUM_CLASSES};

pub use store::{
    read_manifest, write_store, Manifest, RunRecord, WindowOrigin, FEATURES_FILE, LABELS_FILE,
    MANIFEST_FILE, STORE_VERSION,
};

/// The merged column names in canonical order: the five inputs, the nine
/// outputs, then the thirteen states. The omega and torque reference tables
/// are read and validated but not merged; the measured engine speed and torque
/// already appear among the inputs and outputs.
pub fn column_names() -> Vec<String> {
    let mut cols = Vec::with_capacity(NUM_CHANNELS);
    cols.extend(INPUT_CHANNELS.iter().map(|c| format!("input.{c}")));
    cols.extend(OUTPUT_CHANNELS.iter().map(|c| format!("output.{c}")));
    cols.extend(STATE_CHANNELS.iter().map(|c| format!("state.{c}")));
    debug_assert_eq!(cols.len(), NUM_CHANNELS);
    cols
}

fn expected_channels() -> [Vec<&'static str>; 5] {
    [
        vec![OMEGA_CHANNEL],
        vec![TORQUE_CHANNEL],
        INPUT_CHANNELS.to_vec(),
        OUTPUT_CHANNELS.to_vec(),
        STATE_CHANNELS.to_vec(),
    ]
}

/// The five tables of one run with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRun {
    pub tables: [Table; 5],
    pub label: u8,
    pub onset_s: Option<f64>,
    pub source: PathBuf,
}

impl RawRun {
    fn name(&self) -> String {
        self.source.display().to_string()
    }

    /// Check channel headers, row counts and timestamp order.
    pub fn validate(&self) -> Result<()> {
        let malformed = |m: String| Error::MalformedRun {
            run: self.name(),
            message: m,
        };
        if self.label as usize >= NUM_CLASSES {
            return Err(malformed(format!("label {} out of range", self.label)));
        }
        for ((table, expected), file) in
            self.tables.iter().zip(expected_channels()).zip(TABLE_FILES)
        {
            if table.channels != expected {
                return Err(malformed(format!(
                    "{file}: unexpected columns {:?}",
                    table.channels
                )));
            }
            if table.len() < 2 {
                return Err(malformed(format!("{file}: needs at least 2 rows")));
            }
            if table.times.windows(2).any(|p| !(p[1] > p[0])) {
                return Err(malformed(format!(
                    "{file}: timestamps not strictly increasing"
                )));
            }
            if table.values.iter().any(|c| c.len() != table.len()) {
                return Err(malformed(format!("{file}: ragged columns")));
            }
        }
        Ok(())
    }
}

/// Load and validate a run directory written in the five-file layout.
pub fn read_run(dir: &Path) -> Result<RawRun> {
    let meta = RunMeta::read(&dir.join(META_FILE))?;
    let mut tables = Vec::with_capacity(5);
    for file in TABLE_FILES {
        tables.push(read_table(&dir.join(file))?);
    }
    let run = RawRun {
        tables: tables.try_into().expect("five tables"),
        label: meta.fault_id,
        onset_s: if meta.fault_id == 0 {
            None
        } else {
            meta.onset_s
        },
        source: dir.to_path_buf(),
    };
    if run.label > 0 && run.onset_s.is_none() {
        return Err(Error::MalformedRun {
            run: run.name(),
            message: "faulty run without onset_s".into(),
        });
    }
    run.validate()?;
    Ok(run)
}

/// Fill NaN gaps: interior gaps linearly between the nearest finite neighbours,
/// edges with the nearest finite value. `times` are the sample positions.
pub fn fix_missing(times: &[f64], values: &[f64], run: &str, column: &str) -> Result<Vec<f64>> {
    if times.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} timestamps for {} values",
            times.len(),
            values.len()
        )));
    }
    let known: Vec<usize> = (0..values.len())
        .filter(|&i| values[i].is_finite())
        .collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(Error::UnrecoverableColumn {
            run: run.to_string(),
            column: column.to_string(),
        });
    };
    let mut out = values.to_vec();
    out[..first].fill(values[first]);
    out[last + 1..].fill(values[last]);
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in a + 1..b {
            out[i] =
                values[a] + (times[i] - times[a]) / (times[b] - times[a]) * (values[b] - values[a]);
        }
    }
    Ok(out)
}

/// Linear interpolation of `(times, values)` at each target time. Targets
/// outside the sampled range take the nearest edge value.
pub fn resample_linear(times: &[f64], values: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if times.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} timestamps for {} values",
            times.len(),
            values.len()
        )));
    }
    if times.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "resampling needs at least 2 source points, got {}",
            times.len()
        )));
    }
    let last = times.len() - 1;
    Ok(targets
        .iter()
        .map(|&t| {
            if t <= times[0] {
                return values[0];
            }
            if t >= times[last] {
                return values[last];
            }
            // first index with times[i] > t, so times[i-1] <= t < times[i]
            let i = times.partition_point(|&x| x <= t);
            let (t0, t1) = (times[i - 1], times[i]);
            if t == t0 {
                return values[i - 1];
            }
            values[i - 1] + (t - t0) / (t1 - t0) * (values[i] - values[i - 1])
        })
        .collect())
}

/// A run on a uniform grid: `values` is `len × 27`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedFrame {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    /// First grid step labeled with the fault, if any.
    pub onset_step: Option<usize>,
}

impl MergedFrame {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * NUM_CHANNELS..(t + 1) * NUM_CHANNELS]
    }
}

/// Uniform grid of `steps` points starting at the earliest timestamp with
/// spacing `(latest − earliest) / steps`.
pub fn run_grid(raw: &RawRun, steps: usize) -> Vec<f64> {
    let start = raw
        .tables
        .iter()
        .map(|t| t.times[0])
        .fold(f64::INFINITY, f64::min);
    let end = raw
        .tables
        .iter()
        .map(|t| t.times[t.len() - 1])
        .fold(f64::NEG_INFINITY, f64::max);
    let dt = (end - start) / steps as f64;
    (0..steps).map(|i| start + i as f64 * dt).collect()
}

/// Resample all tables onto one `steps`-point grid and concatenate columns.
/// Labels are the fault id from the onset onward and 0 before.
pub fn merge_run(raw: &RawRun, steps: usize) -> Result<MergedFrame> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "sequence length must be at least 1".into(),
        ));
    }
    raw.validate()?;
    let grid = run_grid(raw, steps);
    let run = raw.name();
    let mut values = vec![0.0; steps * NUM_CHANNELS];
    let mut col = 0;
    for (table, file) in raw.tables.iter().zip(TABLE_FILES).skip(2) {
        for (name, series) in table.channels.iter().zip(&table.values) {
            let column = format!("{file}:{name}");
            let filled = fix_missing(&table.times, series, &run, &column)?;
            let resampled =
                resample_linear(&table.times, &filled, &grid).map_err(|e| Error::MalformedRun {
                    run: run.clone(),
                    message: format!("{column}: {e}"),
                })?;
            for (t, v) in resampled.into_iter().enumerate() {
                values[t * NUM_CHANNELS + col] = v;
            }
            col += 1;
        }
    }
    let onset_step = match raw.onset_s {
        Some(onset) if raw.label > 0 => grid.iter().position(|&t| t >= onset),
        _ => None,
    };
    let labels = (0..steps)
        .map(|t| match onset_step {
            Some(o) if t >= o => raw.label,
            _ => 0,
        })
        .collect();
    Ok(MergedFrame {
        times: grid,
        values,
        labels,
        onset_step,
    })
}

/// Number of windows of length `window` at stride `stride` in `len` steps.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > len {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Overlapping windows over one frame, stored as 32-bit features.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub window: usize,
    /// `n × window × 27`, row-major.
    pub features: Vec<f32>,
    /// Per-step labels, `n × window`.
    pub step_labels: Vec<u8>,
    /// Window start indices within the frame.
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// The label of window `i`: that of its last step.
    pub fn label(&self, i: usize) -> u8 {
        self.step_labels[(i + 1) * self.window - 1]
    }
}

/// Cut `frame` into windows of `window` rows every `stride` rows; a trailing
/// remainder shorter than `window` is dropped.
pub fn sliding_window(frame: &MergedFrame, window: usize, stride: usize) -> Result<WindowSet> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window and stride must be at least 1".into(),
        ));
    }
    if stride > window {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} exceeds window {window}"
        )));
    }
    if window > frame.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds sequence length {}",
            frame.len()
        )));
    }
    let n = window_count(frame.len(), window, stride);
    let starts: Vec<usize> = (0..n).map(|i| i * stride).collect();
    let mut features = Vec::with_capacity(n * window * NUM_CHANNELS);
    let mut step_labels = Vec::with_capacity(n * window);
    for &s in &starts {
        features.extend(
            frame.values[s * NUM_CHANNELS..(s + window) * NUM_CHANNELS]
                .iter()
                .map(|&v| v as f32),
        );
        step_labels.extend_from_slice(&frame.labels[s..s + window]);
    }
    Ok(WindowSet {
        window,
        features,
        step_labels,
        starts,
    })
}

/// Grid and window settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Grid length `T` per run.
    pub seq_len: usize,
    pub window: usize,
    pub stride: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            seq_len: 300,
            window: 64,
            stride: 32,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("preprocess.stride", "must be at least 1"));
        }
        if self.stride > self.window {
            return Err(Error::config(
                "preprocess.stride",
                "must not exceed the window length",
            ));
        }
        if self.window > self.seq_len {
            return Err(Error::config(
                "preprocess.window",
                "must not exceed seq_len",
            ));
        }
        Ok(())
    }
}

/// Class directories under a corpus root, sorted by class id. Non-numeric
/// entries are ignored.
pub fn class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if let Some(id) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<u8>().ok())
        {
            if path.is_dir() {
                dirs.push((id, path));
            }
        }
    }
    dirs.sort();
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

fn run_dirs(class_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(class_dir).map_err(|e| Error::io(class_dir, e))? {
        let path = entry.map_err(|e| Error::io(class_dir, e))?.path();
        let partial = path.extension().is_some_and(|e| e == "partial");
        if path.is_dir() && !partial {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Run identifier relative to the corpus root, e.g. `3/run_0007`.
fn run_id(dir: &Path) -> String {
    let parts: Vec<String> = dir
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    parts.into_iter().rev().collect::<Vec<_>>().join("/")
}

/// Merge and window a single run directory.
pub fn process_run(dir: &Path, cfg: &PreprocessConfig) -> Result<(MergedFrame, WindowSet, u8)> {
    let raw = read_run(dir)?;
    let frame = merge_run(&raw, cfg.seq_len)?;
    let windows = sliding_window(&frame, cfg.window, cfg.stride)?;
    Ok((frame, windows, raw.label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub runs: usize,
    pub skipped: Vec<String>,
    pub windows: usize,
    pub class_histogram: Vec<usize>,
}

/// Preprocess every run under `class_dirs` (in sorted class, run order) and
/// write the window store into `out`. Malformed runs are skipped with a
/// warning; more than 10% skipped is an error.
pub fn preprocess_corpus(
    class_dirs: &[PathBuf],
    cfg: &PreprocessConfig,
    out: &Path,
    exec: Execution,
) -> Result<PreprocessSummary> {
    cfg.validate()?;
    let mut dirs = Vec::new();
    for class_dir in class_dirs {
        dirs.extend(run_dirs(class_dir)?);
    }
    let results = par::map(exec, &dirs, |dir| process_run(dir, cfg));

    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for (dir, result) in dirs.iter().zip(results) {
        match result {
            Ok((frame, windows, label)) => {
                runs.push((run_id(dir), label, frame.onset_step, windows))
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                skipped.push(run_id(dir));
            }
        }
    }
    if !dirs.is_empty() && skipped.len() * 10 > dirs.len() {
        return Err(Error::TooManySkipped {
            skipped: skipped.len(),
            total: dirs.len(),
        });
    }
    let manifest = write_store(out, cfg, &runs, &skipped)?;
    Ok(PreprocessSummary {
        runs: runs.len(),
        skipped,
        windows: manifest.num_windows,
        class_histogram: manifest.class_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nan() -> f64 {
        f64::NAN
    }

    #[test]
    fn fix_missing_examples() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(
            fix_missing(&t, &[1.0, nan(), 3.0], "r", "c").unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(
            fix_missing(&t, &[nan(), 5.0, 5.0, nan()], "r", "c").unwrap(),
            vec![5.0; 4]
        );
        let err = fix_missing(&t, &[nan(); 4], "run_7", "wastegate").unwrap_err();
        assert!(
            matches!(err, Error::UnrecoverableColumn { ref run, ref column } if run == "run_7" && column == "wastegate")
        );
    }

    #[test]
    fn resample_examples() {
        assert_eq!(
            resample_linear(&[0.0, 2.0], &[0.0, 2.0], &[1.0]).unwrap(),
            vec![1.0]
        );
        let t = [0.0, 0.5, 1.5, 4.0];
        let v = [3.0, -1.0, 2.5, 7.0];
        assert_eq!(resample_linear(&t, &v, &t).unwrap(), v.to_vec());
        assert_eq!(
            resample_linear(&t, &v, &[-1.0, 9.0]).unwrap(),
            vec![3.0, 7.0]
        );
        assert!(matches!(
            resample_linear(&[0.0], &[1.0], &[0.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_count(1800, 64, 32), 55);
        assert_eq!(window_count(300, 64, 32), 8);
        let frame = MergedFrame {
            times: (0..128).map(|t| t as f64).collect(),
            values: (0..128 * NUM_CHANNELS).map(|v| v as f64).collect(),
            labels: (0..128).map(|t| u8::from(t >= 100) * 4).collect(),
            onset_step: Some(100),
        };
        let ws = sliding_window(&frame, 64, 64).unwrap();
        assert_eq!(ws.starts, vec![0, 64]);
        assert_eq!(ws.features.len(), 128 * NUM_CHANNELS);
        assert_eq!(ws.label(0), 0);
        assert_eq!(ws.label(1), 4);
        let whole = sliding_window(&frame, 128, 5).unwrap();
        assert_eq!(whole.len(), 1);
        assert!(sliding_window(&frame, 129, 1).is_err());
    }

    #[test]
    fn column_order() {
        let cols = column_names();
        assert_eq!(cols.len(), 27);
        assert_eq!(cols[0], "input.throttle_area");
        assert_eq!(cols[5], "output.compressor_temp");
        assert_eq!(cols[14], "state.air_filter_temp");
        assert_eq!(cols[26], "state.turbine_speed");
    }

    #[test]
    fn run_id_is_relative() {
        assert_eq!(run_id(Path::new("/tmp/corpus/3/run_0007")), "3/run_0007");
    }
}
