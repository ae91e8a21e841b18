//! The run configuration file: every setting for generation, preprocessing,
//! the model and training, with defaults for anything left out.

use std::path::{Path, PathBuf};

use enginefault::models::{ModelConfig, ModelKind, RnnConfig, TransformerConfig};
use enginefault::preprocess::PreprocessConfig;
use enginefault::testbed_sim::CorpusConfig;
use enginefault::train_eval::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Base directory for every output.
    pub out: PathBuf,
    /// Corpus directory; defaults to `<out>/corpus`.
    pub corpus: Option<PathBuf>,
    /// Window store directory; defaults to `<out>/store`.
    pub store: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            corpus: None,
            store: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.15, 0.15],
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub transformer: TransformerConfig,
    pub rnn: RnnConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transformer,
            transformer: TransformerConfig::default(),
            rnn: RnnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads for data-parallel stages (`0` = all cores). The
    /// `ENGINEFAULT_THREADS` variable overrides it.
    pub threads: usize,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
}

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn corpus_dir(&self) -> PathBuf {
        self.paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.paths.out.join("corpus"))
    }

    pub fn store_dir(&self) -> PathBuf {
        self.paths
            .store
            .clone()
            .unwrap_or_else(|| self.paths.out.join("store"))
    }

    /// Training output directory for the selected model.
    pub fn model_dir(&self) -> PathBuf {
        self.paths.out.join(self.model.kind.to_string())
    }

    pub fn model_config(&self) -> ModelConfig {
        match self.model.kind {
            ModelKind::Transformer => ModelConfig::Transformer(self.model.transformer.clone()),
            ModelKind::Rnn => ModelConfig::Rnn(self.model.rnn.clone()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.corpus.seed = seed;
            self.split.seed = seed;
            self.training.init_seed = seed;
            self.training.shuffle_seed = seed;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(kind) = o.model {
            self.model.kind = kind;
        }
        if let Some(epochs) = o.epochs {
            self.training.epochs = epochs;
        }
    }

    /// Check every section and the constraints between them. All violations
    /// are collected, each prefixed with its path.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut check = |r: enginefault::Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.corpus.validate());
        check(self.preprocess.validate());
        check(in_section(
            self.model.transformer.validate(),
            "model.transformer",
        ));
        check(in_section(self.model.rnn.validate(), "model.rnn"));
        check(self.training.validate());
        let [a, b, c] = self.split.ratios;
        if [a, b, c].iter().any(|&r| r.is_nan() || r <= 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            problems.push(
                "configuration error at `split.ratios`: must be positive and sum to 1".into(),
            );
        }
        if self.model.transformer.window != self.preprocess.window {
            problems.push(format!(
                "configuration error at `model.transformer.window`: must equal preprocess.window ({} vs {})",
                self.model.transformer.window, self.preprocess.window
            ));
        }
        if self.preprocess.seq_len > self.corpus.duration_s as usize * 2 + 1 {
            problems.push(format!(
                "configuration error at `preprocess.seq_len`: {} steps oversample a {} s run",
                self.preprocess.seq_len, self.corpus.duration_s
            ));
        }
        let seeds = [
            ("corpus.seed", self.corpus.seed),
            ("split.seed", self.split.seed),
            ("training.init_seed", self.training.init_seed),
            ("training.shuffle_seed", self.training.shuffle_seed),
        ];
        for (field, seed) in seeds {
            if seed > i64::MAX as u64 {
                problems.push(format!(
                    "configuration error at `{field}`: must fit in a signed 64-bit integer"
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(problems))
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    /// Write the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Model validation names fields `model.<key>`; point them at the table the
/// key lives in.
fn in_section(r: enginefault::Result<()>, section: &str) -> enginefault::Result<()> {
    r.map_err(|e| match e {
        enginefault::Error::Config { field, message } => enginefault::Error::Config {
            field: format!(
                "{section}.{}",
                field.strip_prefix("model.").unwrap_or(&field)
            ),
            message,
        },
        other => other,
    })
}

/// Parse configuration text, fill defaults, apply overrides and validate.
pub fn validate_config(text: &str, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig =
        toml::from_str(text).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

/// Read and validate a configuration file; `None` means all defaults.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| {
            CliError::Validation(vec![format!("cannot read config {}: {e}", p.display())])
        })?,
        None => String::new(),
    };
    validate_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = validate_config("", &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.training.epochs, 20);
        assert_eq!(cfg.model.transformer.num_heads, 9);
        assert_eq!(cfg.preprocess.seq_len, 300);
    }

    #[test]
    fn heads_not_dividing_input_dim_is_rejected() {
        let err = validate_config(
            "[model.transformer]\nnum_heads = 5\n",
            &Overrides::default(),
        )
        .unwrap_err();
        let CliError::Validation(problems) = err else {
            panic!("expected validation error")
        };
        assert!(problems
            .iter()
            .any(|p| p.contains("model.transformer.num_heads") && p.contains("divisible")));
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "threads = 2\n[training]\nepochs = 3\naggregation = \"majority\"\n[corpus]\nruns_per_class = 5\n";
        let o = Overrides {
            seed: Some(42),
            model: Some(ModelKind::Rnn),
            ..Overrides::default()
        };
        let cfg = validate_config(text, &o).unwrap();
        assert_eq!(cfg.training.init_seed, 42);
        let echoed = cfg.to_toml().unwrap();
        let again = validate_config(&echoed, &Overrides::default()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_and_inconsistent_fields_are_reported_with_paths() {
        assert!(matches!(
            validate_config("[training]\nepoch = 3\n", &Overrides::default()),
            Err(CliError::Validation(_))
        ));
        let err = validate_config(
            "[preprocess]\nwindow = 32\nstride = 16\n",
            &Overrides::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("model.transformer.window"));
        let err = validate_config("[split]\nratios = [0.5, 0.5, 0.5]\n", &Overrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("split.ratios"));
    }
}
