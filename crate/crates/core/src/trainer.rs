//! Data preparation, Adam with step decay and clipping, the epoch loop with
//! temperature annealing and best-validation selection, and checkpoints.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParameterStore, Tensor, TensorError};
use crate::config::{dataset_fingerprint, ConfigError, ExperimentConfig, GraphMode, PriorConfig};
use crate::data::{self, DataError, Standardizer, TimeSeriesTensor, Window, WindowSpec};
use crate::evaluator::{self, EvalError};
use crate::forecaster::{Forecaster, WindowBatch};
use crate::model::{GraphSource, GtsModel, ModelError};
use crate::structure::{self, AnnealSchedule, GraphDistribution, PriorGraph, StructureError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {value}")]
    Diverged {
        epoch: usize,
        batch: usize,
        value: f64,
        history: TrainingHistory,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl From<StructureError> for TrainError {
    fn from(e: StructureError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}

type Result<T> = std::result::Result<T, TrainError>;

/// Temperature at optimisation step `step`.
pub fn anneal_temperature(step: usize, schedule: &AnnealSchedule) -> f64 {
    schedule.temperature(step)
}

/// A dataset after cleaning, splitting and scaling.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub window: WindowSpec,
    /// Cleaned data in original units, before splitting.
    pub cleaned: TimeSeriesTensor,
    pub raw: [TimeSeriesTensor; 3],
    pub scaled: [TimeSeriesTensor; 3],
    pub standardizer: Standardizer,
    pub prior: Option<PriorGraph>,
    pub fingerprint: String,
}

pub const TRAIN: usize = 0;
pub const VAL: usize = 1;
pub const TEST: usize = 2;

/// Resample, clean, split, standardise and resolve the prior graph.
/// `dataset_dir` anchors relative prior-file paths.
pub fn prepare(cfg: &ExperimentConfig, dataset: &TimeSeriesTensor, dataset_dir: Option<&Path>) -> Result<PreparedData> {
    cfg.validate()?;
    let fingerprint = dataset_fingerprint(dataset);
    let mut x = dataset.clone();
    if let Some(factor) = cfg.data.resample.filter(|&f| f > 1) {
        x = data::resample_mean(&x, factor)?.0;
    }
    let lower = cfg.data.lower.unwrap_or(f64::NEG_INFINITY);
    let upper = cfg.data.upper.unwrap_or(f64::INFINITY);
    let cleaned = data::clean_series(&x, lower, upper)?;
    let (train, val, test) = data::temporal_split(&cleaned, cfg.split, cfg.window)?;
    let standardizer = Standardizer::fit(&train);
    let scaled = [
        standardizer.transform(&train),
        standardizer.transform(&val),
        standardizer.transform(&test),
    ];
    let n = cleaned.series();
    let prior = match &cfg.graph.prior {
        PriorConfig::None => None,
        PriorConfig::Knn { k, similarity } => Some(structure::build_knn_prior(&scaled[TRAIN], *k, *similarity)?),
        PriorConfig::File { path } => {
            let full = match dataset_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.clone(),
            };
            Some(PriorGraph::load(&full, n)?)
        }
        PriorConfig::Random { density, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Some(PriorGraph::random(n, *density, *seed, &mut rng)?)
        }
    };
    for &t in &cfg.model.targets {
        if t >= cleaned.features() {
            return Err(ConfigError::Invalid {
                field: "model.targets",
                reason: format!("feature {t} not in a dataset with {} features", cleaned.features()),
            }
            .into());
        }
    }
    Ok(PreparedData {
        window: cfg.window,
        cleaned,
        raw: [train, val, test],
        scaled,
        standardizer,
        prior,
        fingerprint,
    })
}

/// Model shapes for a prepared dataset.
pub fn build_model(cfg: &ExperimentConfig, data: &PreparedData) -> Result<GtsModel> {
    let forecaster = Forecaster {
        cell: cfg.model.cell,
        input_features: data.cleaned.features(),
        targets: cfg.model.targets.clone(),
        input_len: cfg.window.input,
        horizon: cfg.window.horizon,
    };
    let source = match cfg.graph.mode {
        GraphMode::Learned => GraphSource::Learned {
            series: structure::series_matrix(&data.scaled[TRAIN]),
        },
        GraphMode::FixedPrior => GraphSource::Fixed {
            adjacency: data
                .prior
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid {
                    field: "graph.prior",
                    reason: "fixed_prior mode needs a prior graph".into(),
                })?
                .adjacency()
                .clone(),
        },
    };
    Ok(GtsModel {
        forecaster,
        structure: cfg.structure,
        source,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParameterStore,
    v: ParameterStore,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParameterStore, grads: &ParameterStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter").data();
            let m = self.m.get_mut(name).expect("moment").data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment").data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.m.get(name).expect("moment").data();
            let v = self.v.get(name).expect("moment").data();
            for ((w, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *w -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate after applying `decay_ratio` once per passed milestone.
pub fn learning_rate(base: f64, decay_ratio: f64, milestones: &[f64], epoch: usize, epochs: usize) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
        .count();
    base * decay_ratio.powi(passed as i32)
}

/// Rescale gradients so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_all(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub val_mae: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.get(e))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

/// Everything needed to predict with a trained model.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: GtsModel,
    pub params: ParameterStore,
    /// Temperature used for evaluation samples.
    pub temperature: f64,
    pub epoch: usize,
    pub val_mae: f64,
}

impl TrainedModel {
    pub fn distribution(&self) -> Result<Option<GraphDistribution>> {
        Ok(self.model.distribution(&self.params)?)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub trained: TrainedModel,
    pub history: TrainingHistory,
    /// State of the training generator after the last step.
    pub rng: ChaCha8Rng,
}

/// Generator for the validation pass after `epoch`, independent of the
/// training stream.
pub fn eval_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream + 1);
    r
}

fn batch_of(windows: &[Window], segment: &TimeSeriesTensor, spec: WindowSpec, fc: &Forecaster) -> Result<WindowBatch> {
    let pairs: Vec<(Tensor, Tensor)> = windows
        .iter()
        .map(|w| (w.input(segment, spec), w.target(segment, spec)))
        .collect();
    Ok(WindowBatch::new(fc, &pairs).map_err(ModelError::from)?)
}

/// Train with Adam on the standardised training windows, validating after
/// every epoch and keeping the parameters with the lowest validation MAE.
pub fn fit(cfg: &ExperimentConfig, data: &PreparedData) -> Result<FitOutcome> {
    cfg.validate()?;
    let model = build_model(cfg, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.init_params(&mut rng)?;
    let spec = cfg.window;
    let train = &data.scaled[TRAIN];
    let mut windows = data::make_windows(train, spec)?;
    let batches_per_epoch = windows.len().div_ceil(cfg.train.batch_size);
    let total_steps = cfg.train.epochs * batches_per_epoch;
    let anneal = cfg.graph.anneal.resolved(total_steps);
    let prior = data.prior.as_ref().map(|p| p.adjacency().clone());
    let lambda = if prior.is_some() { cfg.graph.lambda } else { 0.0 };
    let n = model.n();

    let mut adam = Adam::new(&params);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut step = 0usize;
    let started = Instant::now();

    for epoch in 0..cfg.train.epochs {
        let lr = learning_rate(
            cfg.train.learning_rate,
            cfg.train.decay_ratio,
            &cfg.train.milestones,
            epoch,
            cfg.train.epochs,
        );
        windows.shuffle(&mut rng);
        let (mut loss_sum, mut mae_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, chunk) in windows.chunks(cfg.train.batch_size).enumerate() {
            let s = anneal.temperature(step);
            let noise = model.is_learned().then(|| structure::logistic_noise(n, &mut rng));
            let batch = batch_of(chunk, train, spec, &model.forecaster)?;
            let mut g = Graph::new();
            let out = model.loss(&mut g, &params, &batch, noise.as_ref(), s, prior.as_ref(), lambda);
            let out = match out {
                Ok(o) => o,
                Err(e) if e.is_non_finite() => {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: b,
                        value: f64::NAN,
                        history,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let value = g.value(out.total).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    value,
                    history,
                });
            }
            let mut grads = match g.backward(out.total) {
                Ok(grads) => grads.for_store(&params),
                Err(TensorError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: b,
                        value,
                        history,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            clip_global_norm(&mut grads, cfg.train.clip_norm);
            adam.step(&mut params, &grads, lr);
            loss_sum += value * chunk.len() as f64;
            mae_sum += g.value(out.mae).item() * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let s_now = anneal.temperature(step);
        let snapshot = TrainedModel {
            model: model.clone(),
            params: params.clone(),
            temperature: s_now,
            epoch,
            val_mae: f64::NAN,
        };
        let mut vr = eval_rng(cfg.seed, epoch as u64);
        let val_mae = match evaluator::segment_mae(&snapshot, data, VAL, cfg.train.val_samples, &mut vr) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batches_per_epoch,
                    value: v,
                    history,
                })
            }
            Err(EvalError::Model(e)) if e.is_non_finite() => {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batches_per_epoch,
                    value: f64::NAN,
                    history,
                })
            }
            Err(e) => return Err(e.into()),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_mae: mae_sum / seen as f64,
            val_mae,
            temperature: s_now,
            learning_rate: lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_mae < *v) {
            best = Some((val_mae, epoch, params.clone()));
        }
    }

    let (val_mae, epoch, best_params) = best.expect("at least one epoch");
    history.best_epoch = Some(epoch);
    Ok(FitOutcome {
        trained: TrainedModel {
            model,
            params: best_params,
            temperature: anneal.temperature(total_steps),
            epoch,
            val_mae,
        },
        history,
        rng,
    })
}

/// Generator position recorded next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            algorithm: "chacha8".into(),
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let seed: [u8; 32] = hex::decode(&self.seed).ok()?.try_into().ok()?;
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos.parse().ok()?);
        Some(r)
    }
}

/// JSON sidecar of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub epoch: usize,
    pub val_mae: f64,
    pub temperature: f64,
    pub rng_state: RngState,
}

pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_INDEX: &str = "checkpoint.index.json";
pub const CHECKPOINT_META: &str = "checkpoint.meta.json";

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Write the parameter container, its index and the metadata sidecar.
pub fn save_checkpoint(dir: &Path, trained: &TrainedModel, meta: &CheckpointMeta) -> Result<Vec<PathBuf>> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (blob, index) = trained.params.to_bytes();
    let files = [
        (dir.join(CHECKPOINT_BIN), blob),
        (
            dir.join(CHECKPOINT_INDEX),
            serde_json::to_vec_pretty(&index).expect("index serialises"),
        ),
        (
            dir.join(CHECKPOINT_META),
            serde_json::to_vec_pretty(meta).expect("meta serialises"),
        ),
    ];
    for (path, bytes) in &files {
        write_atomic(path, bytes).map_err(io_err(path))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, CheckpointMeta)> {
    let bad = |reason: String| TrainError::Checkpoint {
        path: dir.to_path_buf(),
        reason,
    };
    let params = ParameterStore::load(&dir.join(CHECKPOINT_BIN), &dir.join(CHECKPOINT_INDEX))
        .map_err(|e| bad(e.to_string()))?;
    let meta_text = fs::read_to_string(dir.join(CHECKPOINT_META)).map_err(|e| bad(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text).map_err(|e| bad(e.to_string()))?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests;
