//! The assembled model: structure learner feeding sampled graphs to the
//! graph-recurrent forecaster, and the training objective built on top.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Graph, ParameterStore, Tensor, TensorError, Var};
use crate::forecaster::{self, ForecastError, Forecaster, Supports, WindowBatch};
use crate::structure::{self, GraphDistribution, StructureConfig, StructureError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

impl ModelError {
    /// True when a NaN or infinity surfaced anywhere in the computation.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            ModelError::Tensor(TensorError::NonFinite { .. })
                | ModelError::Structure(StructureError::Tensor(TensorError::NonFinite { .. }))
                | ModelError::Forecast(ForecastError::Tensor(TensorError::NonFinite { .. }))
                | ModelError::Forecast(ForecastError::Gate {
                    source: TensorError::NonFinite { .. },
                    ..
                })
        )
    }

    /// The underlying tensor error, for use inside gradient-check closures.
    pub fn into_tensor(self) -> TensorError {
        match self {
            ModelError::Tensor(t)
            | ModelError::Structure(StructureError::Tensor(t))
            | ModelError::Forecast(ForecastError::Tensor(t)) => t,
            ModelError::Forecast(ForecastError::Gate { source, .. }) => source,
            other => TensorError::Container(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, ModelError>;

/// Where the adjacency fed to the forecaster comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphSource {
    /// Learned from the per-series training history `[n, L]`.
    Learned { series: Tensor },
    /// A fixed adjacency; no structure parameters are trained.
    Fixed { adjacency: Tensor },
}

#[derive(Clone, Debug)]
pub struct GtsModel {
    pub forecaster: Forecaster,
    pub structure: StructureConfig,
    pub source: GraphSource,
}

/// Nodes of one evaluated training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mae: Var,
    pub reg: Option<Var>,
    pub adjacency: Var,
}

impl GtsModel {
    pub fn n(&self) -> usize {
        match &self.source {
            GraphSource::Learned { series } => series.shape()[0],
            GraphSource::Fixed { adjacency } => adjacency.shape()[0],
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.source, GraphSource::Learned { .. })
    }

    /// Fresh parameters: structure learner first (if any), then forecaster.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        if let GraphSource::Learned { series } = &self.source {
            structure::init_params(&mut store, &self.structure, series.shape()[1], rng)?;
        } else if let GraphSource::Fixed { adjacency } = &self.source {
            forecaster::check_adjacency(adjacency)?;
        }
        self.forecaster.init_params(&mut store, rng)?;
        Ok(store)
    }

    /// θ for a learned graph; `None` for a fixed one.
    pub fn distribution(&self, params: &ParameterStore) -> Result<Option<GraphDistribution>> {
        match &self.source {
            GraphSource::Learned { series } => Ok(Some(GraphDistribution::from_params(
                params,
                &self.structure,
                series,
            )?)),
            GraphSource::Fixed { .. } => Ok(None),
        }
    }

    /// Adjacency node for one training step. `noise` is the logistic
    /// perturbation for a learned graph and is ignored for a fixed one.
    /// Also returns the θ node when `want_theta` is set.
    pub fn adjacency(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        noise: Option<&Tensor>,
        s: f64,
        want_theta: bool,
    ) -> Result<(Var, Option<Var>)> {
        match &self.source {
            GraphSource::Fixed { adjacency } => Ok((g.constant(adjacency.clone())?, None)),
            GraphSource::Learned { series } => {
                let z = structure::extract_features(g, params, &self.structure, series)?;
                let logits = structure::link_logits(g, params, z)?;
                let zero;
                let noise = match noise {
                    Some(t) => t,
                    None => {
                        zero = Tensor::zeros(&[self.n(), self.n()]);
                        &zero
                    }
                };
                let a = structure::relaxed_adjacency(g, logits, noise, s)?;
                let theta = if want_theta {
                    Some(structure::link_probs(g, logits)?)
                } else {
                    None
                };
                Ok((a, theta))
            }
        }
    }

    /// `mean |X̂ − X| + λ · CE(θ, prior)` for one batch and one graph sample.
    /// The absolute error is averaged over windows, horizon steps, nodes and
    /// target features.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        batch: &WindowBatch,
        noise: Option<&Tensor>,
        s: f64,
        prior: Option<&Tensor>,
        lambda: f64,
    ) -> Result<LossVars> {
        let want_theta = lambda > 0.0 && prior.is_some() && self.is_learned();
        let (a, theta) = self.adjacency(g, params, noise, s, want_theta)?;
        let sup = Supports::new(g, a)?;
        let preds = forecaster::forecast(g, params, &self.forecaster, sup, &batch.inputs)?;
        let mut diffs = Vec::with_capacity(preds.len());
        for (p, t) in preds.iter().zip(&batch.targets) {
            let t = g.constant(t.clone())?;
            diffs.push(g.sub(*p, t)?);
        }
        let all = if diffs.len() == 1 {
            diffs[0]
        } else {
            g.concat(&diffs, 0)?
        };
        let abs = g.abs(all)?;
        let mae = g.mean(abs)?;
        let (total, reg) = match (theta, prior) {
            (Some(th), Some(prior)) => {
                let reg = structure::regularization_term(g, th, prior)?;
                let scaled = g.scale(reg, lambda)?;
                (g.add(mae, scaled)?, Some(reg))
            }
            _ => (mae, None),
        };
        Ok(LossVars {
            total,
            mae,
            reg,
            adjacency: a,
        })
    }

    /// Predictions `[B, n, targets]` per horizon step on a given adjacency.
    pub fn predict(&self, params: &ParameterStore, inputs: &[Tensor], adjacency: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let a = g.constant(adjacency.clone())?;
        let sup = Supports::new(&mut g, a)?;
        let preds = forecaster::forecast(&mut g, params, &self.forecaster, sup, inputs)?;
        Ok(preds.iter().map(|p| g.value(*p).clone()).collect())
    }

    /// Draw an adjacency: a relaxed sample at temperature `s` for a learned
    /// graph, the fixed matrix otherwise.
    pub fn sample_adjacency<R: Rng>(
        &self,
        theta: Option<&GraphDistribution>,
        s: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        match (&self.source, theta) {
            (GraphSource::Fixed { adjacency }, _) => Ok(adjacency.clone()),
            (GraphSource::Learned { .. }, Some(dist)) => Ok(structure::sample_graph(dist, s, rng)?.adjacency),
            (GraphSource::Learned { .. }, None) => Err(ModelError::Structure(StructureError::Config(
                "a learned graph needs θ to sample from".into(),
            ))),
        }
    }
}
