use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gts::config::{ConfigError, ExperimentConfig};
use gts::data::{self, DataError, TimeSeriesTensor};
use gts::evaluator::{self, EvalError};
use gts::model::ModelError;
use gts::structure::{GraphDistribution, StructureError};
use gts::synth::{self, SynthError, SynthSpec};
use gts::trainer::{self, CheckpointMeta, PreparedData, RngState, TrainError, TrainedModel};

/// Exit 1 for bad input, exit 2 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<Vec<PathBuf>, Failure>;

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        usage(e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        usage(e)
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        usage(e)
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::Structure(
            StructureError::PriorFile { .. }
            | StructureError::Config(_)
            | StructureError::KOutOfRange { .. }
            | StructureError::SeriesTooShort { .. },
        ) => usage(e),
        e => runtime(e),
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Data(_) | TrainError::Checkpoint { .. } => usage(e),
            TrainError::Model(m) => model_failure(m),
            TrainError::Eval(inner) => (*inner).into(),
            e => runtime(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::AllMasked
            | EvalError::Horizon { .. }
            | EvalError::InsufficientHistory { .. }
            | EvalError::Invalid(_)
            | EvalError::Data(_) => usage(e),
            EvalError::Model(m) => model_failure(m),
            EvalError::Train(t) => (*t).into(),
            e => runtime(e),
        }
    }
}

fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure> {
    let items: Result<Vec<T>, _> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| usage(format!("invalid {what} {s:?}"))))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(usage(format!("empty {what} list")));
    }
    Ok(items)
}

/// Write every file via temp-then-rename; content is fully built first.
fn write_all(dir: &Path, files: Vec<(&str, Vec<u8>)>) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        trainer::write_atomic(&path, &bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of series.
    #[arg(long)]
    pub n: usize,
    /// Number of time steps.
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.25)]
    pub density: f64,
    /// Observation noise std relative to the unit-scaled signal.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs) -> Outcome {
    let spec = SynthSpec {
        n: a.n,
        steps: a.steps,
        density: a.density,
        noise: a.noise,
        seed: a.seed,
    };
    let mut d = synth::generate(&spec)?;
    d.series.feature_names = vec!["value".into()];

    fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    let staging = tempfile::Builder::new()
        .prefix(".synth")
        .tempdir_in(&a.out)
        .map_err(runtime)?;
    data::write_dataset(staging.path(), &d.series).map_err(runtime)?;
    let mut names: Vec<PathBuf> = fs::read_dir(staging.path())
        .map_err(runtime)?
        .map(|e| e.map(|e| PathBuf::from(e.file_name())))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    names.sort();
    let mut paths = Vec::new();
    for name in names {
        let target = a.out.join(&name);
        fs::rename(staging.path().join(&name), &target).map_err(runtime)?;
        paths.push(target);
    }
    paths.extend(write_all(&a.out, vec![("truth_graph.csv", d.truth.to_csv().into_bytes())])?);
    Ok(paths)
}

fn resolve_dataset(cfg: &mut ExperimentConfig, data_arg: Option<&Path>, root: Option<&Path>) -> Result<PathBuf, Failure> {
    if let Some(p) = data_arg {
        cfg.data.path = Some(p.to_path_buf());
    }
    let dir = cfg
        .dataset_dir(root)
        .ok_or_else(|| usage("data.path: no dataset given (set data.path or pass --data)"))?;
    cfg.data.path = Some(dir.clone());
    Ok(dir)
}

fn load_prepared(cfg: &ExperimentConfig, dir: &Path) -> Result<(TimeSeriesTensor, PreparedData), Failure> {
    let dataset = data::load_dataset(dir)?;
    let prepared = trainer::prepare(cfg, &dataset, Some(dir))?;
    Ok((dataset, prepared))
}

fn theta_csv(trained: &TrainedModel, data: &PreparedData) -> Result<(GraphDistribution, String), Failure> {
    let dist = match trained.distribution()? {
        Some(d) => d,
        None => {
            let prior = data.prior.as_ref().ok_or_else(|| runtime("fixed graph without a prior"))?;
            GraphDistribution::new(prior.adjacency().clone()).map_err(runtime)?
        }
    };
    let csv = dist.to_csv();
    Ok((dist, csv))
}

fn all_horizons(tau: usize) -> Vec<usize> {
    (1..=tau).collect()
}

/// Stream of the generator used for final metric reports.
const REPORT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "gts-run")]
    pub out: PathBuf,
}

pub fn train(a: &TrainArgs, root: Option<&Path>) -> Outcome {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let dir = resolve_dataset(&mut cfg, a.data.as_deref(), root)?;
    cfg.validate()?;
    let (_, prepared) = load_prepared(&cfg, &dir)?;

    let outcome = match trainer::fit(&cfg, &prepared) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            batch,
            value,
            history,
        }) => {
            let _ = write_all(&a.out, vec![("history.csv", history.to_csv().into_bytes())]);
            return Err(runtime(format!(
                "training diverged at epoch {epoch}, batch {batch} (loss {value}); history kept in {}",
                a.out.join("history.csv").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let trained = &outcome.trained;
    let (_, theta) = theta_csv(trained, &prepared)?;
    let mut rng = trainer::eval_rng(cfg.seed, REPORT_STREAM);
    let report = evaluator::evaluate_model(
        trained,
        &prepared,
        trainer::TEST,
        &all_horizons(cfg.window.horizon),
        cfg.train.eval_samples,
        &mut rng,
    )?;
    let meta = CheckpointMeta {
        config_hash: cfg.hash(),
        dataset_fingerprint: prepared.fingerprint.clone(),
        epoch: trained.epoch,
        val_mae: trained.val_mae,
        temperature: trained.temperature,
        rng_state: RngState::capture(&outcome.rng),
    };

    let mut paths = trainer::save_checkpoint(&a.out, trained, &meta)?;
    paths.extend(write_all(
        &a.out,
        vec![
            ("history.csv", outcome.history.to_csv().into_bytes()),
            ("theta.csv", theta.into_bytes()),
            ("config.resolved.json", cfg.resolved_json().into_bytes()),
            ("metrics.json", report.to_json().into_bytes()),
            ("metrics.csv", report.to_csv().into_bytes()),
        ],
    )?);
    eprintln!(
        "best epoch {} of {}: val MAE {:.6}, test MAE {:.6}",
        trained.epoch,
        outcome.history.len(),
        trained.val_mae,
        report.overall.mae
    );
    Ok(paths)
}

/// Options shared by commands that reload a trained checkpoint.
#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Directory written by `gts train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config to check against the checkpoint; defaults to its resolved config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; defaults to `data.path` of the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn restore(a: &CheckpointArgs, root: Option<&Path>) -> Result<(ExperimentConfig, PreparedData, TrainedModel), Failure> {
    let (params, meta) = trainer::load_checkpoint(&a.checkpoint)?;
    let cfg_path = a
        .config
        .clone()
        .unwrap_or_else(|| a.checkpoint.join("config.resolved.json"));
    let mut cfg = ExperimentConfig::load(&cfg_path)?;
    if cfg.hash() != meta.config_hash {
        return Err(usage(format!(
            "config hash mismatch: {} does not match the checkpoint",
            cfg_path.display()
        )));
    }
    let dir = resolve_dataset(&mut cfg, a.data.as_deref(), root)?;
    let (_, prepared) = load_prepared(&cfg, &dir)?;
    if prepared.fingerprint != meta.dataset_fingerprint {
        return Err(usage(format!(
            "dataset hash mismatch: {} is not the dataset the checkpoint was trained on",
            dir.display()
        )));
    }
    let model = trainer::build_model(&cfg, &prepared)?;
    let expected = model
        .init_params(&mut ChaCha8Rng::seed_from_u64(0))
        .map_err(model_failure)?;
    let shapes = |s: &gts::autodiff::ParameterStore| {
        s.iter()
            .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    if shapes(&expected) != shapes(&params) {
        return Err(usage("checkpoint parameters do not match the config"));
    }
    let trained = TrainedModel {
        model,
        params,
        temperature: meta.temperature,
        epoch: meta.epoch,
        val_mae: meta.val_mae,
    };
    Ok((cfg, prepared, trained))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Segment {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Comma-separated steps ahead, e.g. "3,6,12"; defaults to every step.
    #[arg(long)]
    pub horizons: Option<String>,
    /// Graph samples averaged per prediction; defaults to `train.eval_samples`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Seed of the graph samples; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "test")]
    pub segment: Segment,
    /// Output directory; defaults to the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs, root: Option<&Path>) -> Outcome {
    let (cfg, prepared, trained) = restore(&a.ckpt, root)?;
    let horizons = match &a.horizons {
        Some(h) => parse_list::<usize>(h, "horizon")?,
        None => all_horizons(cfg.window.horizon),
    };
    let segment = match a.segment {
        Segment::Train => trainer::TRAIN,
        Segment::Val => trainer::VAL,
        Segment::Test => trainer::TEST,
    };
    let mut rng = trainer::eval_rng(a.seed.unwrap_or(cfg.seed), REPORT_STREAM);
    let samples = a.samples.unwrap_or(cfg.train.eval_samples);
    let report = evaluator::evaluate_model(&trained, &prepared, segment, &horizons, samples, &mut rng)?;
    let out = a.out.clone().unwrap_or_else(|| a.ckpt.checkpoint.clone());
    write_all(
        &out,
        vec![
            ("metrics.json", report.to_json().into_bytes()),
            ("metrics.csv", report.to_csv().into_bytes()),
        ],
    )
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Edges with θ at or above this value are exported.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Output directory; defaults to the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn export_graph(a: &ExportArgs, root: Option<&Path>) -> Outcome {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let (_, prepared, trained) = restore(&a.ckpt, root)?;
    let (dist, theta) = theta_csv(&trained, &prepared)?;
    let mut edges = String::from("src,dst\n");
    for (i, j) in dist.edges(a.threshold) {
        edges.push_str(&format!("{i},{j}\n"));
    }
    let out = a.out.clone().unwrap_or_else(|| a.ckpt.checkpoint.clone());
    write_all(
        &out,
        vec![("theta.csv", theta.into_bytes()), ("edges.csv", edges.into_bytes())],
    )
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated regularization strengths.
    #[arg(long, default_value = "0,1,10,100")]
    pub lambdas: String,
    /// Comma-separated seeds averaged per λ; defaults to the config seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated steps ahead; defaults to every step.
    #[arg(long)]
    pub horizons: Option<String>,
    /// Override `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "gts-sweep")]
    pub out: PathBuf,
}

pub fn sweep(a: &SweepArgs, root: Option<&Path>) -> Outcome {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    let lambdas = parse_list::<f64>(&a.lambdas, "lambda")?;
    if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(usage("lambdas must be finite and >= 0"));
    }
    let seeds = match &a.seeds {
        Some(s) => parse_list::<u64>(s, "seed")?,
        None => vec![cfg.seed],
    };
    let horizons = match &a.horizons {
        Some(h) => parse_list::<usize>(h, "horizon")?,
        None => all_horizons(cfg.window.horizon),
    };
    let dir = resolve_dataset(&mut cfg, a.data.as_deref(), root)?;
    let (_, prepared) = load_prepared(&cfg, &dir)?;
    if prepared.prior.is_none() {
        return Err(usage("graph.prior: a sweep needs a prior graph"));
    }
    let table = evaluator::run_sweep(&cfg, &prepared, &lambdas, &seeds, &horizons)?;
    write_all(
        &a.out,
        vec![
            ("sweep.csv", table.to_csv().into_bytes()),
            ("sweep.svg", table.to_svg().into_bytes()),
        ],
    )
}
