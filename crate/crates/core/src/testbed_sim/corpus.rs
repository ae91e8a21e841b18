//! On-disk corpus: five CSV tables plus `meta.json` per run, laid out as
//! `<root>/<fault_id>/run_<NNNN>/`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{derive_seed, stream};
use crate::par::{self, Execution};
use crate::NUM_CLASSES;

use super::{
    default_templates, generate_cycle, inject_fault, simulate_run, FaultShape, FaultTemplate,
    SimConfig, SimulationRun, Site, Table,
};

pub const TABLE_FILES: [&str; 5] = [
    "omega.csv",
    "torque.csv",
    "input_signal.csv",
    "output_signal.csv",
    "states_signal.csv",
];
pub const META_FILE: &str = "meta.json";

/// Contents of `meta.json`. Fault fields are `null` for fault-free runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub fault_id: u8,
    pub site: Option<Site>,
    pub channel: Option<usize>,
    pub shape: Option<FaultShape>,
    pub onset_s: Option<f64>,
    pub duration_s: Option<f64>,
    pub magnitude: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub cycle_seed: Option<u64>,
    #[serde(default)]
    pub run_duration_s: Option<f64>,
}

impl RunMeta {
    pub fn for_run(run: &SimulationRun, cycle_seed: Option<u64>) -> Self {
        let f = run.fault.as_ref();
        Self {
            fault_id: f.map_or(0, |f| f.fault_id),
            site: f.map(|f| f.site),
            channel: f.map(|f| f.channel),
            shape: f.map(|f| f.shape),
            onset_s: f.map(|f| f.onset_s),
            duration_s: f.and_then(|f| f.duration_s),
            magnitude: f.map(|f| f.magnitude),
            seed: run.seed,
            cycle_seed,
            run_duration_s: Some(run.duration_s),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Write a table as CSV: header row, time column first, missing values as
/// empty fields. Floats use the shortest representation that parses back to
/// the same value.
pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["time_s".to_string()];
    header.extend(table.channels.iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    let mut record = Vec::with_capacity(header.len());
    for (i, t) in table.times.iter().enumerate() {
        record.clear();
        record.push(t.to_string());
        for col in &table.values {
            let v = col[i];
            record.push(if v.is_finite() {
                v.to_string()
            } else {
                String::new()
            });
        }
        w.write_record(&record).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse a table written by [`write_table`]; empty fields become NaN.
pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let malformed = |m: String| Error::MalformedRun {
        run: path.display().to_string(),
        message: m,
    };
    if header.len() < 2 || &header[0] != "time_s" {
        return Err(malformed(
            "expected a `time_s` column followed by channels".into(),
        ));
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut times = Vec::new();
    let mut values = vec![Vec::new(); channels.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != header.len() {
            return Err(malformed(format!(
                "row {} has {} fields",
                line + 1,
                rec.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            if s.trim().is_empty() {
                Ok(f64::NAN)
            } else {
                s.trim()
                    .parse()
                    .map_err(|_| malformed(format!("row {}: cannot parse `{s}`", line + 1)))
            }
        };
        let t = parse(&rec[0])?;
        if !t.is_finite() {
            return Err(malformed(format!("row {}: missing timestamp", line + 1)));
        }
        times.push(t);
        for (c, field) in rec.iter().skip(1).enumerate() {
            values[c].push(parse(field)?);
        }
    }
    Ok(Table {
        channels,
        times,
        values,
    })
}

/// Write the five tables and `meta.json` of `run` into `dir` (created if
/// needed).
pub fn write_run(run: &SimulationRun, dir: &Path) -> Result<()> {
    write_run_with_meta(run, dir, &RunMeta::for_run(run, None))
}

fn write_run_with_meta(run: &SimulationRun, dir: &Path, meta: &RunMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ((_, table), file) in run.tables().iter().zip(TABLE_FILES) {
        write_table(table, &dir.join(file))?;
    }
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub runs_per_class: usize,
    pub duration_s: u32,
    pub seed: u64,
    /// Fault onsets are drawn uniformly from this fraction range of the run.
    pub onset_fraction: (f64, f64),
    /// Fraction of input-table samples blanked out before writing.
    pub missing_rate: f64,
    pub sim: SimConfig,
    pub templates: Vec<FaultTemplate>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            runs_per_class: 40,
            duration_s: 300,
            seed: 2024,
            onset_fraction: (0.5, 0.75),
            missing_rate: 0.002,
            sim: SimConfig::default(),
            templates: default_templates(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs_per_class == 0 {
            return Err(Error::config("corpus.runs_per_class", "must be at least 1"));
        }
        if self.duration_s < 10 {
            return Err(Error::config("corpus.duration_s", "must be at least 10 s"));
        }
        let (lo, hi) = self.onset_fraction;
        if !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) {
            return Err(Error::config(
                "corpus.onset_fraction",
                "needs 0 <= lo <= hi < 1",
            ));
        }
        if !(0.0..0.5).contains(&self.missing_rate) {
            return Err(Error::config("corpus.missing_rate", "must be in [0, 0.5)"));
        }
        if !(self.sim.sample_rate_hz > 0.0) || !(self.sim.noise_level >= 0.0) {
            return Err(Error::config(
                "corpus.sim",
                "sample rate must be positive and noise non-negative",
            ));
        }
        let mut ids: Vec<u8> = self.templates.iter().map(|t| t.fault_id).collect();
        ids.sort_unstable();
        if ids != (1..NUM_CLASSES as u8).collect::<Vec<_>>() {
            return Err(Error::config(
                "corpus.templates",
                "need exactly one template for each fault id 1..=11",
            ));
        }
        for (i, t) in self.templates.iter().enumerate() {
            t.at(0.0)
                .validate(self.duration_s as f64)
                .map_err(|e| Error::config(format!("corpus.templates[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}

/// Identity of one generated run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSlot {
    pub fault_id: u8,
    pub index: usize,
}

impl RunSlot {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.fault_id.to_string())
            .join(format!("run_{:04}", self.index))
    }
}

/// Build the run for `slot` in memory (before missing values are applied).
pub fn build_run(cfg: &CorpusConfig, slot: RunSlot) -> Result<(SimulationRun, RunMeta)> {
    let run_seed = derive_seed(cfg.seed, &[slot.fault_id as u64, slot.index as u64]);
    let cycle_seed = derive_seed(run_seed, &[0xCC]);
    let cycle = generate_cycle(cycle_seed, cfg.duration_s)?;
    let mut run = simulate_run(&cycle, run_seed, &cfg.sim);
    if slot.fault_id > 0 {
        let template = cfg
            .templates
            .iter()
            .find(|t| t.fault_id == slot.fault_id)
            .ok_or_else(|| {
                Error::config(
                    "corpus.templates",
                    format!("no template for fault {}", slot.fault_id),
                )
            })?;
        let mut rng = stream(run_seed, &[0x0F5E7]);
        let d = cfg.duration_s as f64;
        let (lo, hi) = cfg.onset_fraction;
        let onset = if hi > lo {
            rng.random_range(lo * d..hi * d)
        } else {
            lo * d
        };
        run = inject_fault(&run, &template.at(onset))?;
    }
    let meta = RunMeta::for_run(&run, Some(cycle_seed));
    Ok((run, meta))
}

/// Blank out a seeded fraction of input-table samples (written as empty CSV
/// fields). The first and last rows are kept intact.
pub fn drop_input_samples(run: &mut SimulationRun, rate: f64) {
    if rate <= 0.0 {
        return;
    }
    let mut rng = stream(run.seed, &[0xD20F]);
    let n = run.input_signal.len();
    for col in &mut run.input_signal.values {
        for v in col.iter_mut().take(n.saturating_sub(1)).skip(1) {
            if rng.random::<f64>() < rate {
                *v = f64::NAN;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub root: PathBuf,
    pub runs_per_class: Vec<usize>,
    pub total_runs: usize,
}

/// Generate the full corpus under `root`: classes `0..=11`, each with
/// `runs_per_class` runs. Each run is written to a `.partial` directory and
/// renamed when complete; failed runs leave nothing behind.
pub fn generate_dataset(cfg: &CorpusConfig, root: &Path, exec: Execution) -> Result<CorpusSummary> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let slots: Vec<RunSlot> = (0..NUM_CLASSES as u8)
        .flat_map(|fault_id| (0..cfg.runs_per_class).map(move |index| RunSlot { fault_id, index }))
        .collect();
    let results = par::map(exec, &slots, |&slot| -> Result<()> {
        let (mut run, meta) = build_run(cfg, slot)?;
        drop_input_samples(&mut run, cfg.missing_rate);
        let dir = slot.dir(root);
        let partial = dir.with_extension("partial");
        let outcome = (|| {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            write_run_with_meta(&run, &partial, &meta)?;
            fs::rename(&partial, &dir).map_err(|e| Error::io(&dir, e))
        })();
        if outcome.is_err() {
            let _ = fs::remove_dir_all(&partial);
        }
        outcome
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(CorpusSummary {
        root: root.to_path_buf(),
        runs_per_class: vec![cfg.runs_per_class; NUM_CLASSES],
        total_runs: slots.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            runs_per_class: 2,
            duration_s: 60,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn corpus_layout_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_dataset(&small_cfg(), dir.path(), Execution::Parallel).unwrap();
        assert_eq!(summary.total_runs, 24);
        let mut count = 0;
        for class in 0..12u8 {
            let class_dir = dir.path().join(class.to_string());
            for entry in fs::read_dir(&class_dir).unwrap() {
                let run_dir = entry.unwrap().path();
                for f in TABLE_FILES {
                    assert!(run_dir.join(f).is_file());
                }
                let meta = RunMeta::read(&run_dir.join(META_FILE)).unwrap();
                assert_eq!(meta.fault_id, class);
                assert_eq!(meta.site.is_none(), class == 0);
                count += 1;
            }
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (run, _) = build_run(
            &small_cfg(),
            RunSlot {
                fault_id: 3,
                index: 1,
            },
        )
        .unwrap();
        write_run(&run, dir.path()).unwrap();
        for ((_, table), file) in run.tables().iter().zip(TABLE_FILES) {
            let back = read_table(&dir.path().join(file)).unwrap();
            assert_eq!(&back, *table);
        }
        let meta = RunMeta::read(&dir.path().join(META_FILE)).unwrap();
        assert_eq!(meta.fault_id, 3);
        assert_eq!(meta.onset_s, run.fault.map(|f| f.onset_s));
    }

    #[test]
    fn missing_samples_round_trip_as_nan() {
        let dir = tempfile::tempdir().unwrap();
        let (mut run, _) = build_run(
            &small_cfg(),
            RunSlot {
                fault_id: 0,
                index: 0,
            },
        )
        .unwrap();
        drop_input_samples(&mut run, 0.2);
        write_table(&run.input_signal, &dir.path().join("in.csv")).unwrap();
        let back = read_table(&dir.path().join("in.csv")).unwrap();
        let nan_in = run
            .input_signal
            .values
            .iter()
            .flatten()
            .filter(|v| v.is_nan())
            .count();
        let nan_back = back.values.iter().flatten().filter(|v| v.is_nan()).count();
        assert!(nan_in > 0);
        assert_eq!(nan_in, nan_back);
    }

    #[test]
    fn generation_is_deterministic_across_execution_modes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&small_cfg(), a.path(), Execution::Parallel).unwrap();
        generate_dataset(&small_cfg(), b.path(), Execution::Sequential).unwrap();
        for class in 0..12u8 {
            for i in 0..2 {
                let slot = RunSlot {
                    fault_id: class,
                    index: i,
                };
                for f in TABLE_FILES.iter().chain([&META_FILE]) {
                    let x = fs::read(slot.dir(a.path()).join(f)).unwrap();
                    let y = fs::read(slot.dir(b.path()).join(f)).unwrap();
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = CorpusConfig::default();
        cfg.templates.pop();
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let cfg = CorpusConfig {
            runs_per_class: 0,
            ..CorpusConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
