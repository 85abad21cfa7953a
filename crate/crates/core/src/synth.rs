//! Synthetic multivariate series driven by a linear diffusion process on a
//! random directed graph, with the generating graph kept as ground truth.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::TimeSeriesTensor;
use crate::structure::{PriorGraph, PriorSource};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 series, got {0}")]
    TooFewSeries(usize),
    #[error("need at least 50 steps, got {0}")]
    TooFewSteps(usize),
    #[error("{field} must be in {range}, got {value}")]
    OutOfRange {
        field: &'static str,
        range: &'static str,
        value: f64,
    },
}

pub const SPECTRAL_RADIUS: f64 = 0.95;
pub const FREQUENCY_SECONDS: u64 = 300;
const BURN_IN: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub steps: usize,
    pub density: f64,
    /// Observation noise std, relative to the unit-scaled clean signal.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n < 2 {
            return Err(SynthError::TooFewSeries(self.n));
        }
        if self.steps < 50 {
            return Err(SynthError::TooFewSteps(self.steps));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(SynthError::OutOfRange {
                field: "density",
                range: "[0, 1]",
                value: self.density,
            });
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SynthError::OutOfRange {
                field: "noise",
                range: "[0, inf)",
                value: self.noise,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub series: TimeSeriesTensor,
    /// `truth[i][j] = 1` for an edge i → j.
    pub truth: PriorGraph,
    /// Transition matrix `M` with `z_t = M z_{t−1} + …`; `M[j][i]` carries i → j.
    pub transition: Vec<Vec<f64>>,
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mat = DMatrix::from_fn(n, n, |r, c| m[r][c]);
    mat.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Shape of the latent process. Magnitudes are before the per-series
/// rescaling to unit variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dynamics {
    pub self_weight: (f64, f64),
    pub edge_weight: (f64, f64),
    /// Range of drive periods in steps.
    pub period: (f64, f64),
    pub drive: f64,
    pub innovation: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            self_weight: (0.2, 0.5),
            edge_weight: (0.6, 1.0),
            period: (24.0, 72.0),
            drive: 0.1,
            innovation: 0.005,
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    generate_with(spec, &Dynamics::default())
}

/// Draw the graph and transition, simulate, scale each series to unit
/// variance and add observation noise.
///
/// Each node follows `z_t = M z_{t−1} + d_t + e_t` where `d_t` is a slow
/// sinusoidal drive with a node-specific period and phase and `e_t` a small
/// Gaussian innovation. Off-diagonal `M[j][i]` is nonzero exactly for the
/// edges i → j; `M` is rescaled to spectral radius 0.95.
pub fn generate_with(spec: &SynthSpec, dy: &Dynamics) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random::<f64>() < spec.density {
                edges.push((i, j));
            }
        }
    }
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = rng.random_range(dy.self_weight.0..dy.self_weight.1);
    }
    for &(i, j) in &edges {
        m[j][i] = rng.random_range(dy.edge_weight.0..dy.edge_weight.1);
    }
    let rho = spectral_radius(&m);
    for v in m.iter_mut().flatten() {
        *v *= SPECTRAL_RADIUS / rho;
    }

    let periods: Vec<f64> = (0..n).map(|_| rng.random_range(dy.period.0..dy.period.1)).collect();
    let phases: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let innovation = Normal::new(0.0, dy.innovation).expect("finite std");
    let mut z = vec![0.0; n];
    let mut clean = vec![Vec::with_capacity(spec.steps); n];
    for t in 0..BURN_IN + spec.steps {
        let prev = z.clone();
        for j in 0..n {
            let drive = (std::f64::consts::TAU * t as f64 / periods[j] + phases[j]).sin();
            z[j] = m[j].iter().zip(&prev).map(|(a, b)| a * b).sum::<f64>()
                + dy.drive * drive
                + innovation.sample(&mut rng);
        }
        if t >= BURN_IN {
            for j in 0..n {
                clean[j].push(z[j]);
            }
        }
    }

    let obs = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let series: Vec<Vec<f64>> = clean
        .into_iter()
        .map(|col| {
            let len = col.len() as f64;
            let mean = col.iter().sum::<f64>() / len;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            col.into_iter()
                .map(|v| {
                    let e = if spec.noise > 0.0 { obs.sample(&mut rng) } else { 0.0 };
                    (v - mean) / sd + e
                })
                .collect()
        })
        .collect();

    let truth = PriorGraph::from_edges(n, &edges, PriorSource::Truth).expect("edges within range");
    Ok(SynthData {
        series: TimeSeriesTensor::from_series(&series, FREQUENCY_SECONDS),
        truth,
        transition: m,
    })
}

/// Adjacency of the generating graph as a tensor.
pub fn truth_adjacency(data: &SynthData) -> &Tensor {
    data.truth.adjacency()
}
