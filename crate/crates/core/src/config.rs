//! Run configuration: a TOML document with `[model]`, `[train]`, optional
//! `[paths]` and optional `[synthetic]` sections. Unknown keys are rejected
//! and the whole document is validated before anything runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::ModelConfig;
use crate::numerics::Matrix;
use crate::training::{LabeledSequence, SyntheticTask, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Feature files to train on; each `x.feat` needs an `x.labels` sidecar.
    #[serde(default)]
    pub train: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch metrics table.
    pub history: Option<PathBuf>,
}

/// Generated training data; unset fields keep the long-dependency defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub sequences: usize,
    pub seed: u64,
    pub lag: Option<(usize, usize)>,
    pub trigger_len: Option<usize>,
    pub noise_std: Option<f64>,
    pub signal: Option<f64>,
    /// Held-out sequences for accuracy reports, drawn from `seed + 1`.
    /// Defaults to a quarter of `sequences`, at least one.
    pub test_sequences: Option<usize>,
}

impl SyntheticData {
    pub fn task(&self, model: &ModelConfig) -> SyntheticTask {
        let base = SyntheticTask::long_dependency(model.feature_dim, model.classes);
        SyntheticTask {
            lag: self.lag.unwrap_or(base.lag),
            trigger_len: self.trigger_len.unwrap_or(base.trigger_len),
            noise_std: self.noise_std.unwrap_or(base.noise_std),
            signal: self.signal.unwrap_or(base.signal),
            ..base
        }
    }

    pub fn train_set(&self, model: &ModelConfig) -> Result<Vec<LabeledSequence>> {
        self.task(model).generate(self.sequences, self.seed)
    }

    pub fn test_set(&self, model: &ModelConfig) -> Result<Vec<LabeledSequence>> {
        let count = self.test_sequences.unwrap_or((self.sequences / 4).max(1));
        self.task(model).generate(count, self.seed.wrapping_add(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: Paths,
    pub synthetic: Option<SyntheticData>,
}

impl RunConfig {
    /// Parses and validates. Relative paths stay as written.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads from a file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.paths.train.iter_mut().for_each(resolve);
        config.paths.checkpoint.iter_mut().for_each(resolve);
        config.paths.history.iter_mut().for_each(resolve);
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(format!("[model] {}", strip(e))))?;
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("[train] {}", strip(e))))?;
        if let Some(s) = &self.synthetic {
            let task = s.task(&self.model);
            if s.sequences == 0 || s.test_sequences == Some(0) {
                return Err(Error::Config(
                    "[synthetic] sequences and test_sequences must be positive".into(),
                ));
            }
            if !(task.noise_std >= 0.0 && task.noise_std.is_finite() && task.signal.is_finite()) {
                return Err(Error::Config(
                    "[synthetic] noise_std and signal must be finite".into(),
                ));
            }
            task.generate(0, 0)
                .map_err(|e| Error::Config(format!("[synthetic] {}", strip(e))))?;
        }
        Ok(())
    }

    /// Training sequences: the configured files, any extra files, then the
    /// generated set.
    pub fn dataset(&self, extra: &[PathBuf]) -> Result<Vec<LabeledSequence>> {
        let mut data = Vec::new();
        for path in self.paths.train.iter().chain(extra) {
            data.push(load_sequence(path)?);
        }
        if let Some(s) = &self.synthetic {
            data.extend(s.train_set(&self.model)?);
        }
        if data.is_empty() {
            return Err(Error::Config(
                "no training data: list [paths] train, pass files, or add [synthetic]".into(),
            ));
        }
        Ok(data)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Sidecar path for a feature file: same stem, `.labels` extension.
pub fn labels_path(features: &Path) -> PathBuf {
    features.with_extension("labels")
}

pub fn load_sequence(features: &Path) -> Result<LabeledSequence> {
    let m = io::read_features(features)?;
    let labels = io::read_labels(labels_path(features))?;
    let m64 = Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) as f64);
    LabeledSequence::new(m64, labels)
}
