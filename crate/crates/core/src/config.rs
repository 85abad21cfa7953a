//! Experiment configuration. Every field except `window.T` and `window.tau`
//! has a default, and [`ExperimentConfig::resolved_json`] writes all of them
//! out so that a run can be reproduced from the resolved file alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{TimeSeriesTensor, WindowSpec};
use crate::forecaster::DcgruConfig;
use crate::structure::{AnnealSchedule, Similarity, StructureConfig};

/// Environment variable naming the directory that relative dataset paths
/// are resolved against.
pub const DATA_DIR_ENV: &str = "GTS_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; relative paths are resolved against
    /// `GTS_DATA_DIR` when set.
    pub path: Option<PathBuf>,
    /// Readings below this bound are treated as missing.
    pub lower: Option<f64>,
    /// Readings above this bound are treated as missing.
    pub upper: Option<f64>,
    /// Average every `resample` raw steps into one.
    pub resample: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub cell: DcgruConfig,
    /// Indices of the forecast feature channels.
    pub targets: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cell: DcgruConfig::default(),
            targets: vec![0],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Learn θ jointly with the forecaster.
    #[default]
    Learned,
    /// Use the prior as a fixed adjacency; no structure learner.
    FixedPrior,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    #[default]
    None,
    Knn {
        k: usize,
        #[serde(default)]
        similarity: Similarity,
    },
    /// Adjacency CSV or edge list; relative paths are resolved against the
    /// dataset directory.
    File { path: PathBuf },
    /// Directed random graph drawn from its own seed.
    Random { density: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub mode: GraphMode,
    pub prior: PriorConfig,
    pub lambda: f64,
    pub anneal: AnnealSchedule,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            mode: GraphMode::Learned,
            prior: PriorConfig::None,
            lambda: 0.0,
            anneal: AnnealSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_ratio: f64,
    /// Fractions of `epochs` after which the learning rate is multiplied by
    /// `decay_ratio`.
    pub milestones: Vec<f64>,
    pub clip_norm: f64,
    /// Graph samples averaged per prediction in the final evaluation.
    pub eval_samples: usize,
    /// Graph samples averaged per prediction in the per-epoch validation.
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.01,
            decay_ratio: 0.1,
            milestones: vec![0.6, 0.8],
            clip_norm: 5.0,
            eval_samples: 10,
            val_samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub window: WindowSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub structure: StructureConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the window.
    pub fn new(window: WindowSpec) -> Self {
        Self {
            data: DataConfig::default(),
            split: default_split(),
            window,
            model: ModelConfig::default(),
            structure: StructureConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }

    /// Parse JSON; schema errors carry the dotted path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner().to_string();
            let mut path = e.path().to_string();
            // A missing field is reported at its parent; append the name.
            if let Some(name) = inner
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split('`').next())
            {
                path = if path == "." {
                    name.to_string()
                } else {
                    format!("{path}.{name}")
                };
            }
            ConfigError::Schema { path, message: inner }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.window
            .validate()
            .map_err(|e| ConfigError::invalid("window", e.to_string()))?;
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::invalid("split", "fractions must be positive and sum to 1"));
        }
        if let (Some(lo), Some(hi)) = (self.data.lower, self.data.upper) {
            if !(lo < hi) {
                return Err(ConfigError::invalid("data.lower", "lower must be below upper"));
            }
        }
        if self.data.resample == Some(0) {
            return Err(ConfigError::invalid("data.resample", "factor must be at least 1"));
        }
        if self.model.cell.hidden == 0 || self.model.cell.layers == 0 {
            return Err(ConfigError::invalid("model", "hidden and layers must be at least 1"));
        }
        if self.model.targets.is_empty() {
            return Err(ConfigError::invalid("model.targets", "need at least one target feature"));
        }
        self.structure
            .validate()
            .map_err(|e| ConfigError::invalid("structure", e.to_string()))?;
        self.graph
            .anneal
            .validate()
            .map_err(|e| ConfigError::invalid("graph.anneal", e.to_string()))?;
        if !(self.graph.lambda >= 0.0 && self.graph.lambda.is_finite()) {
            return Err(ConfigError::invalid("graph.lambda", "must be finite and >= 0"));
        }
        if self.graph.lambda > 0.0 && self.graph.prior == PriorConfig::None {
            return Err(ConfigError::invalid("graph.prior", "lambda > 0 needs a prior graph"));
        }
        if self.graph.mode == GraphMode::FixedPrior && self.graph.prior == PriorConfig::None {
            return Err(ConfigError::invalid("graph.prior", "fixed_prior mode needs a prior graph"));
        }
        if let PriorConfig::Random { density, .. } = self.graph.prior {
            if !(0.0..=1.0).contains(&density) {
                return Err(ConfigError::invalid("graph.prior.density", "must lie in [0, 1]"));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_samples == 0 || t.val_samples == 0 {
            return Err(ConfigError::invalid(
                "train",
                "epochs, batch_size, eval_samples and val_samples must be at least 1",
            ));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(ConfigError::invalid("train.learning_rate", "must be positive"));
        }
        if !(t.decay_ratio > 0.0 && t.decay_ratio <= 1.0) {
            return Err(ConfigError::invalid("train.decay_ratio", "must lie in (0, 1]"));
        }
        if t.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(ConfigError::invalid("train.milestones", "fractions must lie in [0, 1]"));
        }
        if !(t.clip_norm > 0.0) {
            return Err(ConfigError::invalid("train.clip_norm", "must be positive"));
        }
        Ok(())
    }

    /// Pretty JSON with every default materialised.
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// SHA-256 of the compact resolved JSON, without `data.path`: where the
    /// dataset lives does not change the run, and its content is checked
    /// separately through [`dataset_fingerprint`].
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data.path = None;
        let compact = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    /// Dataset directory after applying `GTS_DATA_DIR` to relative paths.
    pub fn dataset_dir(&self, data_root: Option<&Path>) -> Option<PathBuf> {
        let p = self.data.path.as_ref()?;
        Some(match data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.clone(),
        })
    }
}

/// SHA-256 over a dataset's shape, ids, frequency, values and mask.
pub fn dataset_fingerprint(x: &TimeSeriesTensor) -> String {
    let mut h = Sha256::new();
    let (f, s, n) = x.shape();
    for v in [f, s, n] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(x.frequency_seconds.to_le_bytes());
    for id in x.series_ids.iter().chain(&x.feature_names) {
        h.update(id.as_bytes());
        h.update([0]);
    }
    for v in x.values() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(x.mask().iter().map(|&m| m as u8).collect::<Vec<_>>());
    hex::encode(h.finalize())
}
