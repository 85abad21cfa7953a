//! Graph structure learning: whole-series feature extraction, pairwise link
//! probabilities, relaxed Bernoulli sampling of adjacency matrices, kNN
//! prior graphs and the cross-entropy pull towards a prior.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Graph, ParameterStore, Tensor, TensorError, Var};
use crate::data::TimeSeriesTensor;

/// Clamp applied to θ before taking logs, and to uniform draws before the
/// double log of the Gumbel transform.
pub const EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum StructureError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("k = {k} out of range for {n} series (need 1 <= k <= n-1)")]
    KOutOfRange { k: usize, n: usize },
    #[error("series of length {len} is shorter than the convolution kernel {kernel}")]
    SeriesTooShort { len: usize, kernel: usize },
    #[error("{path}: {reason}")]
    PriorFile { path: PathBuf, reason: String },
    #[error("invalid structure config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, StructureError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    /// Embedding size `d` of the per-series feature vector.
    pub embedding: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Width of the hidden layer of the link predictor.
    pub hidden: usize,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            embedding: 16,
            conv_channels: 8,
            kernel: 10,
            stride: 1,
            hidden: 16,
        }
    }
}

impl StructureConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embedding", self.embedding),
            ("conv_channels", self.conv_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(StructureError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Length of the convolution output for an input of `len` steps.
    pub fn conv_out_len(&self, len: usize) -> Result<usize> {
        if len < self.kernel {
            return Err(StructureError::SeriesTooShort {
                len,
                kernel: self.kernel,
            });
        }
        Ok((len - self.kernel) / self.stride + 1)
    }
}

/// Parameter names used by the structure learner.
pub mod names {
    pub const CONV_KERNEL: &str = "extractor.conv.kernel";
    pub const CONV_BIAS: &str = "extractor.conv.bias";
    pub const FC_WEIGHT: &str = "extractor.fc.weight";
    pub const FC_BIAS: &str = "extractor.fc.bias";
    pub const FC1_WEIGHT: &str = "predictor.fc1.weight";
    pub const FC1_BIAS: &str = "predictor.fc1.bias";
    pub const FC2_WEIGHT: &str = "predictor.fc2.weight";
    pub const FC2_BIAS: &str = "predictor.fc2.bias";
}

/// Uniform Glorot-style initialisation for a weight of the given shape.
pub(crate) fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

/// Register the extractor and link predictor parameters for series of
/// `series_len` training steps.
pub fn init_params<R: Rng>(
    store: &mut ParameterStore,
    cfg: &StructureConfig,
    series_len: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let lout = cfg.conv_out_len(series_len)?;
    let (c, k, d, h) = (cfg.conv_channels, cfg.kernel, cfg.embedding, cfg.hidden);
    store.insert(names::CONV_KERNEL, glorot(rng, &[c, 1, k], k, c * k))?;
    store.insert(names::CONV_BIAS, Tensor::zeros(&[c]))?;
    store.insert(names::FC_WEIGHT, glorot(rng, &[c * lout, d], c * lout, d))?;
    store.insert(names::FC_BIAS, Tensor::zeros(&[d]))?;
    store.insert(names::FC1_WEIGHT, glorot(rng, &[2 * d, h], 2 * d, h))?;
    store.insert(names::FC1_BIAS, Tensor::zeros(&[h]))?;
    store.insert(names::FC2_WEIGHT, glorot(rng, &[h, 1], h, 1))?;
    store.insert(names::FC2_BIAS, Tensor::zeros(&[1]))?;
    Ok(())
}

/// Per-series training history `[n, L]` of the first feature.
pub fn series_matrix(x: &TimeSeriesTensor) -> Tensor {
    let (_, s, n) = x.shape();
    let mut data = Vec::with_capacity(n * s);
    for i in 0..n {
        data.extend(x.series_values(0, i));
    }
    Tensor::new(vec![n, s], data).expect("n * s elements")
}

/// `Z[n, d]`: conv along time, tanh, then a fully connected layer on the
/// flattened channels. Weights are shared by all series.
pub fn extract_features(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &StructureConfig,
    series: &Tensor,
) -> Result<Var> {
    let (n, len) = (series.shape()[0], series.shape()[1]);
    let lout = cfg.conv_out_len(len)?;
    let x = g.constant(series.clone().reshape(vec![n, 1, len])?)?;
    let w = g.param(store, names::CONV_KERNEL)?;
    let b = g.param(store, names::CONV_BIAS)?;
    let conv = g.conv1d(x, w, b, cfg.stride)?;
    let act = g.tanh(conv)?;
    let flat = g.reshape(act, &[n, cfg.conv_channels * lout])?;
    let fw = g.param(store, names::FC_WEIGHT)?;
    let fb = g.param(store, names::FC_BIAS)?;
    let z = g.affine(flat, fw, fb)?;
    layer_norm(g, z)
}

/// Variance floor of the embedding normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Standardise every row of `x` to zero mean and unit variance over its own
/// entries. The FC input is several thousand wide, so without this a few
/// optimiser steps push the embeddings far into the predictor's tanh plateau.
fn layer_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    let avg = g.constant(Tensor::full(&[d, d], 1.0 / d as f64))?;
    let mean = g.matmul(x, avg)?;
    let centred = g.sub(x, mean)?;
    let sq = g.mul(centred, centred)?;
    let var = g.matmul(sq, avg)?;
    let var = g.scale_shift(var, 1.0, NORM_EPS)?;
    let log_var = g.log(var)?;
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    Ok(g.div(centred, std)?)
}

/// Pre-sigmoid link scores `[n, n]` for every ordered pair `(i, j)` from
/// `FC(tanh(FC(z_i ‖ z_j)))`. The diagonal is computed but never used.
pub fn link_logits(g: &mut Graph, store: &ParameterStore, z: Var) -> Result<Var> {
    let n = g.shape(z)[0];
    let rows: Vec<usize> = (0..n * n).map(|p| p / n).collect();
    let cols: Vec<usize> = (0..n * n).map(|p| p % n).collect();
    let zi = g.gather_rows(z, &rows)?;
    let zj = g.gather_rows(z, &cols)?;
    let pair = g.concat(&[zi, zj], 1)?;
    let w1 = g.param(store, names::FC1_WEIGHT)?;
    let b1 = g.param(store, names::FC1_BIAS)?;
    let hidden = g.affine(pair, w1, b1)?;
    let hidden = g.tanh(hidden)?;
    let w2 = g.param(store, names::FC2_WEIGHT)?;
    let b2 = g.param(store, names::FC2_BIAS)?;
    let out = g.affine(hidden, w2, b2)?;
    Ok(g.reshape(out, &[n, n])?)
}

/// Ones off the diagonal, zeros on it.
pub fn off_diagonal_mask(n: usize) -> Tensor {
    let mut t = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        t.set(&[i, i], 0.0);
    }
    t
}

/// θ = sigmoid(logits) with the diagonal forced to zero.
pub fn link_probs(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.shape(logits)[0];
    let p = g.sigmoid(logits)?;
    let mask = g.constant(off_diagonal_mask(n))?;
    Ok(g.mul(p, mask)?)
}

/// Edge probabilities θ. Off-diagonal entries lie in (0, 1); the diagonal
/// is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDistribution {
    theta: Tensor,
}

impl GraphDistribution {
    pub fn new(theta: Tensor) -> Result<Self> {
        let s = theta.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::InvalidShape {
                op: "graph_distribution",
                shape: s.to_vec(),
                reason: "θ must be square".into(),
            }
            .into());
        }
        Ok(Self { theta })
    }

    /// Evaluate θ for the given series without recording gradients.
    pub fn from_params(store: &ParameterStore, cfg: &StructureConfig, series: &Tensor) -> Result<Self> {
        let mut g = Graph::new();
        let z = extract_features(&mut g, store, cfg, series)?;
        let logits = link_logits(&mut g, store, z)?;
        let theta = link_probs(&mut g, logits)?;
        Self::new(g.value(theta).clone())
    }

    pub fn n(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.theta.at(&[i, j])
    }

    /// Ordered pairs `(i, j)` with `θ_ij` at or above `threshold`.
    pub fn edges(&self, threshold: f64) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && self.get(i, j) >= threshold {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Sum of θ per row.
    pub fn expected_out_degree(&self) -> Vec<f64> {
        self.theta.data().chunks(self.n()).map(|r| r.iter().sum()).collect()
    }

    /// CSV rows with six decimals.
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.theta, |v| format!("{v:.6}"))
    }
}

fn matrix_csv(t: &Tensor, fmt: impl Fn(f64) -> String) -> String {
    let n = t.shape()[1];
    let mut out = String::new();
    for row in t.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|&v| fmt(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Logistic perturbation `g1 − g2` of two independent Gumbel(0, 1) draws for
/// every off-diagonal entry; the diagonal is zero.
pub fn logistic_noise<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let g1 = gumbel(rng);
                let g2 = gumbel(rng);
                t.set(&[i, j], g1 - g2);
            }
        }
    }
    t
}

fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(EPS, 1.0 - EPS);
    -(-u.ln()).ln()
}

/// A relaxed adjacency matrix and the temperature it was drawn at.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGraph {
    pub adjacency: Tensor,
    pub temperature: f64,
}

fn check_temperature(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(StructureError::Temperature(s))
    }
}

/// Apply a fixed logistic perturbation to θ at temperature `s`.
pub fn relax_with_noise(dist: &GraphDistribution, noise: &Tensor, s: f64) -> Result<SampledGraph> {
    check_temperature(s)?;
    let n = dist.n();
    if noise.shape() != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "sample_graph",
            lhs: vec![n, n],
            rhs: noise.shape().to_vec(),
        }
        .into());
    }
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let th = dist.get(i, j);
            let logit = th.ln() - (1.0 - th).ln();
            a.set(&[i, j], sigmoid((logit + noise.at(&[i, j])) / s));
        }
    }
    Ok(SampledGraph {
        adjacency: a,
        temperature: s,
    })
}

/// Draw `A_ij = sigmoid((logit θ_ij + g1 − g2) / s)` for every off-diagonal
/// pair; `A_ii = 0`.
pub fn sample_graph<R: Rng>(dist: &GraphDistribution, s: f64, rng: &mut R) -> Result<SampledGraph> {
    check_temperature(s)?;
    let noise = logistic_noise(dist.n(), rng);
    relax_with_noise(dist, &noise, s)
}

/// Differentiable sample from pre-sigmoid scores. `logit θ` equals the
/// scores off the diagonal, so the sigmoid is skipped.
pub fn relaxed_adjacency(g: &mut Graph, logits: Var, noise: &Tensor, s: f64) -> Result<Var> {
    check_temperature(s)?;
    let n = g.shape(logits)[0];
    let eps = g.constant(noise.clone())?;
    let pert = g.add(logits, eps)?;
    let scaled = g.scale(pert, 1.0 / s)?;
    let a = g.sigmoid(scaled)?;
    let mask = g.constant(off_diagonal_mask(n))?;
    Ok(g.mul(a, mask)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Absolute Pearson correlation.
    #[default]
    Pearson,
    /// Absolute cosine similarity.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorSource {
    File(PathBuf),
    Knn { k: usize, similarity: Similarity },
    Truth,
    Random { density: f64, seed: u64 },
}

impl fmt::Display for PriorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorSource::File(p) => write!(f, "file {}", p.display()),
            PriorSource::Knn { k, similarity } => write!(f, "kNN(k={k}, {similarity:?})"),
            PriorSource::Truth => write!(f, "generating graph"),
            PriorSource::Random { density, seed } => write!(f, "random(density={density}, seed={seed})"),
        }
    }
}

/// Binary prior graph `A^a` with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorGraph {
    adjacency: Tensor,
    pub source: PriorSource,
}

impl PriorGraph {
    pub fn new(adjacency: Tensor, source: PriorSource) -> Result<Self> {
        let s = adjacency.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::InvalidShape {
                op: "prior_graph",
                shape: s.to_vec(),
                reason: "adjacency must be square".into(),
            }
            .into());
        }
        let n = s[0];
        for i in 0..n {
            for j in 0..n {
                let v = adjacency.at(&[i, j]);
                if v != 0.0 && v != 1.0 {
                    return Err(StructureError::Config(format!("prior entry ({i},{j}) = {v} is not binary")));
                }
                if i == j && v != 0.0 {
                    return Err(StructureError::Config(format!("prior has a self-loop at {i}")));
                }
            }
        }
        Ok(Self { adjacency, source })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)], source: PriorSource) -> Result<Self> {
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(StructureError::Config(format!("edge {i},{j} outside {n} series")));
            }
            a.set(&[i, j], 1.0);
        }
        Self::new(a, source)
    }

    /// Erdős–Rényi directed graph without self loops.
    pub fn random<R: Rng>(n: usize, density: f64, seed: u64, rng: &mut R) -> Result<Self> {
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random::<f64>() < density {
                    a.set(&[i, j], 1.0);
                }
            }
        }
        Self::new(a, PriorSource::Random { density, seed })
    }

    pub fn n(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.at(&[i, j]) == 1.0
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Read an `n × n` 0/1 adjacency CSV, or an edge list of `src,dst`
    /// lines with an optional `src,dst` header.
    pub fn load(path: &Path, n: usize) -> Result<Self> {
        let bad = |reason: String| StructureError::PriorFile {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let rows: Vec<Vec<&str>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(str::trim).collect())
            .collect();
        let square = rows.len() == n
            && rows
                .iter()
                .all(|r| r.len() == n && r.iter().all(|c| *c == "0" || *c == "1"));
        let source = PriorSource::File(path.to_path_buf());
        if square {
            let data = rows.iter().flatten().map(|c| if *c == "1" { 1.0 } else { 0.0 }).collect();
            return Self::new(Tensor::new(vec![n, n], data)?, source).map_err(|e| bad(e.to_string()));
        }
        let mut edges = Vec::new();
        for (line, r) in rows.iter().enumerate() {
            if line == 0 && r.len() == 2 && r[0].parse::<usize>().is_err() {
                continue;
            }
            if r.len() != 2 {
                return Err(bad(format!("line {}: expected src,dst", line + 1)));
            }
            let parse = |c: &str| {
                c.parse::<usize>()
                    .map_err(|_| bad(format!("line {}: invalid index {c:?}", line + 1)))
            };
            let (i, j) = (parse(r[0])?, parse(r[1])?);
            if i == j {
                return Err(bad(format!("line {}: self loop {i}", line + 1)));
            }
            edges.push((i, j));
        }
        Self::from_edges(n, &edges, source).map_err(|e| bad(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(&self.adjacency, |v| format!("{}", v as u8))
    }
}

fn similarity(a: &[f64], b: &[f64], kind: Similarity) -> f64 {
    let (a, b): (Vec<f64>, Vec<f64>) = match kind {
        Similarity::Cosine => (a.to_vec(), b.to_vec()),
        Similarity::Pearson => {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            (a.iter().map(|v| v - ma).collect(), b.iter().map(|v| v - mb).collect())
        }
    };
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).abs()
    }
}

/// Directed kNN graph: row `i` links to the `k` series most similar to `i`
/// (first feature of `x_train`). Equal similarities go to the lower index.
pub fn build_knn_prior(x_train: &TimeSeriesTensor, k: usize, kind: Similarity) -> Result<PriorGraph> {
    let n = x_train.series();
    if k < 1 || k + 1 > n {
        return Err(StructureError::KOutOfRange { k, n });
    }
    let series: Vec<Vec<f64>> = (0..n).map(|i| x_train.series_values(0, i)).collect();
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut cand: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, similarity(&series[i], &series[j], kind)))
            .collect();
        cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(j, _) in cand.iter().take(k) {
            a.set(&[i, j], 1.0);
        }
    }
    PriorGraph::new(a, PriorSource::Knn { k, similarity: kind })
}

fn check_pair(theta: &Tensor, prior: &Tensor) -> Result<usize> {
    let s = theta.shape();
    if s.len() != 2 || s[0] != s[1] || prior.shape() != s {
        return Err(TensorError::ShapeMismatch {
            op: "regularization_loss",
            lhs: s.to_vec(),
            rhs: prior.shape().to_vec(),
        }
        .into());
    }
    Ok(s[0])
}

/// Cross entropy between θ and a prior, summed over off-diagonal pairs,
/// with θ clamped to `[EPS, 1 − EPS]`.
pub fn regularization_loss(theta: &Tensor, prior: &Tensor) -> Result<f64> {
    let n = check_pair(theta, prior)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let t = theta.at(&[i, j]).clamp(EPS, 1.0 - EPS);
            let a = prior.at(&[i, j]);
            total -= a * t.ln() + (1.0 - a) * (1.0 - t).ln();
        }
    }
    Ok(total)
}

/// Mean cross entropy per off-diagonal entry.
pub fn mean_cross_entropy(theta: &Tensor, prior: &Tensor) -> Result<f64> {
    let n = check_pair(theta, prior)?;
    let pairs = (n * n - n).max(1);
    Ok(regularization_loss(theta, prior)? / pairs as f64)
}

/// Differentiable version of [`regularization_loss`].
pub fn regularization_term(g: &mut Graph, theta: Var, prior: &Tensor) -> Result<Var> {
    let n = check_pair(g.value(theta), prior)?;
    let t = g.clamp(theta, EPS, 1.0 - EPS)?;
    let log_t = g.log(t)?;
    let one_minus = g.one_minus(t)?;
    let log_1mt = g.log(one_minus)?;
    let a = g.constant(prior.clone())?;
    let not_a = g.constant(prior.map(|v| 1.0 - v))?;
    let pos = g.mul(a, log_t)?;
    let neg = g.mul(not_a, log_1mt)?;
    let ll = g.add(pos, neg)?;
    let mask = g.constant(off_diagonal_mask(n))?;
    let ll = g.mul(ll, mask)?;
    let total = g.sum(ll)?;
    Ok(g.scale(total, -1.0)?)
}

/// Exponential temperature decay `s(step) = max(s_min, s0 · exp(−rate · step))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub s0: f64,
    pub s_min: f64,
    /// Decay per optimisation step. `None` picks the rate that reaches
    /// `s_min` halfway through training.
    pub rate: Option<f64>,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            s0: 0.5,
            s_min: 0.1,
            rate: None,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s0 >= self.s_min && self.s0.is_finite()) {
            return Err(StructureError::Config(format!(
                "anneal needs s0 >= s_min > 0, got s0={} s_min={}",
                self.s0, self.s_min
            )));
        }
        if let Some(r) = self.rate {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(StructureError::Config(format!("anneal rate must be >= 0, got {r}")));
            }
        }
        Ok(())
    }

    /// Fix the rate for a run of `total_steps` optimisation steps.
    pub fn resolved(self, total_steps: usize) -> Self {
        if self.rate.is_some() {
            return self;
        }
        let half = (total_steps as f64 / 2.0).max(1.0);
        Self {
            rate: Some((self.s0 / self.s_min).ln() / half),
            ..self
        }
    }

    pub fn temperature(&self, step: usize) -> f64 {
        let r = self.rate.unwrap_or(0.0);
        (self.s0 * (-r * step as f64).exp()).max(self.s_min)
    }
}
