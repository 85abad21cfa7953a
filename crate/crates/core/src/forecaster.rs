//! Diffusion convolution over a (relaxed) adjacency matrix, the
//! diffusion-convolutional GRU cell, and the encoder–decoder forecaster.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParameterStore, Tensor, TensorError, Var};
use crate::structure::glorot;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("adjacency must be square, got {0:?}")]
    NotSquare(Vec<usize>),
    #[error("adjacency entry ({row},{col}) = {value} is negative")]
    NegativeEdge { row: usize, col: usize, value: f64 },
    #[error("non-finite value in gate {gate} of {cell}")]
    Gate {
        cell: String,
        gate: &'static str,
        source: TensorError,
    },
    #[error("window has {got} steps, model expects {expected}")]
    WindowTooShort { got: usize, expected: usize },
    #[error("invalid forecaster config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, ForecastError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcgruConfig {
    pub hidden: usize,
    /// Diffusion degree `K`.
    #[serde(rename = "K")]
    pub k: usize,
    pub layers: usize,
}

impl Default for DcgruConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            k: 2,
            layers: 1,
        }
    }
}

/// Shapes of the seq2seq forecaster.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    pub cell: DcgruConfig,
    /// Features per node fed to the encoder.
    pub input_features: usize,
    /// Feature channels that are forecast, as indices into the input.
    pub targets: Vec<usize>,
    pub input_len: usize,
    pub horizon: usize,
}

/// `prefix.l{layer}.{gate}.w_k1[k]` and friends.
pub fn weight_name(prefix: &str, layer: usize, gate: &str, dir: usize, k: usize) -> String {
    format!("{prefix}.l{layer}.{gate}.w_k{dir}[{k}]")
}

pub fn bias_name(prefix: &str, layer: usize, gate: &str) -> String {
    format!("{prefix}.l{layer}.{gate}.b")
}

pub const PROJ_WEIGHT: &str = "proj.weight";
pub const PROJ_BIAS: &str = "proj.bias";
pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
const GATES: [&str; 3] = ["R", "U", "C"];

impl Forecaster {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForecastError::Config(m));
        if self.cell.hidden == 0 || self.cell.layers == 0 {
            return bad("hidden and layers must be at least 1".into());
        }
        if self.input_features == 0 || self.targets.is_empty() {
            return bad("need at least one input and one target feature".into());
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= self.input_features) {
            return bad(format!("target feature {t} out of range"));
        }
        if self.input_len == 0 || self.horizon == 0 {
            return bad("T and tau must be at least 1".into());
        }
        Ok(())
    }

    pub fn output_features(&self) -> usize {
        self.targets.len()
    }

    fn layer_input(&self, prefix: &str, layer: usize) -> usize {
        match (prefix, layer) {
            (_, l) if l > 0 => self.cell.hidden,
            (ENCODER, _) => self.input_features,
            _ => self.output_features(),
        }
    }

    /// Register encoder, decoder and output projection parameters.
    pub fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        let h = self.cell.hidden;
        for prefix in [ENCODER, DECODER] {
            for layer in 0..self.cell.layers {
                let cin = self.layer_input(prefix, layer) + h;
                let fan_in = cin * (2 * self.cell.k + 1);
                for gate in GATES {
                    for dir in [1, 2] {
                        for k in 0..=self.cell.k {
                            let w = glorot(rng, &[cin, h], fan_in, h);
                            store.insert(weight_name(prefix, layer, gate, dir, k), w)?;
                        }
                    }
                    let b = if gate == "C" { 0.0 } else { 1.0 };
                    store.insert(bias_name(prefix, layer, gate), Tensor::full(&[h], b))?;
                }
            }
        }
        let f = self.output_features();
        store.insert(PROJ_WEIGHT, glorot(rng, &[h, f], h, f))?;
        store.insert(PROJ_BIAS, Tensor::zeros(&[f]))?;
        Ok(())
    }
}

/// Reject non-square or negative adjacency matrices.
pub fn check_adjacency(a: &Tensor) -> Result<()> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(ForecastError::NotSquare(s.to_vec()));
    }
    let n = s[0];
    if let Some(pos) = a.data().iter().position(|&v| v < 0.0) {
        return Err(ForecastError::NegativeEdge {
            row: pos / n,
            col: pos % n,
            value: a.data()[pos],
        });
    }
    Ok(())
}

/// Forward (`D_O⁻¹A`) and reverse (`D_I⁻¹Aᵀ`) random-walk matrices.
#[derive(Clone, Copy, Debug)]
pub struct Supports {
    pub forward: Var,
    pub reverse: Var,
}

impl Supports {
    pub fn new(g: &mut Graph, a: Var) -> Result<Self> {
        check_adjacency(g.value(a))?;
        let forward = g.row_normalize(a)?;
        let at = g.transpose(a)?;
        let reverse = g.row_normalize(at)?;
        Ok(Self { forward, reverse })
    }
}

/// `[Y, P_O Y, …, P_O^K Y, P_I Y, …, P_I^K Y]` along the feature axis of
/// `y[B, n, c]`.
pub fn diffusion_terms(g: &mut Graph, sup: Supports, y: Var, k: usize) -> Result<Var> {
    let mut terms = vec![y];
    for p in [sup.forward, sup.reverse] {
        let mut cur = y;
        for _ in 0..k {
            cur = g.node_mix(p, cur)?;
            terms.push(cur);
        }
    }
    if terms.len() == 1 {
        return Ok(y);
    }
    Ok(g.concat(&terms, 2)?)
}

/// Stack the per-power weights of one gate in the row order produced by
/// [`diffusion_terms`]. Both `k = 0` weights multiply the identity, so they
/// are summed.
fn stacked_weight(g: &mut Graph, store: &ParameterStore, prefix: &str, layer: usize, gate: &str, k: usize) -> Result<Var> {
    let mut rows = Vec::with_capacity(2 * k + 1);
    let w01 = g.param(store, &weight_name(prefix, layer, gate, 1, 0))?;
    let w02 = g.param(store, &weight_name(prefix, layer, gate, 2, 0))?;
    rows.push(g.add(w01, w02)?);
    for dir in [1, 2] {
        for j in 1..=k {
            rows.push(g.param(store, &weight_name(prefix, layer, gate, dir, j))?);
        }
    }
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    Ok(g.concat(&rows, 0)?)
}

/// Apply stacked diffusion weights `w[(2K+1)c, out]` (plus bias) to `y[B, n, c]`.
fn diffusion_affine(g: &mut Graph, sup: Supports, y: Var, k: usize, w: Var, b: Var) -> Result<Var> {
    let (bsz, n) = (g.shape(y)[0], g.shape(y)[1]);
    let terms = diffusion_terms(g, sup, y, k)?;
    let width = g.shape(terms)[2];
    let flat = g.reshape(terms, &[bsz * n, width])?;
    let out = g.affine(flat, w, b)?;
    let cols = g.shape(out)[1];
    Ok(g.reshape(out, &[bsz, n, cols])?)
}

/// Per-power diffusion weights, each `[c_in, c_out]`, for `k = 0..=K`.
#[derive(Clone, Debug)]
pub struct DiffusionWeights {
    pub forward: Vec<Tensor>,
    pub reverse: Vec<Tensor>,
}

/// `Σ_k (D_O⁻¹A)^k Y W_{k,1} + (D_I⁻¹Aᵀ)^k Y W_{k,2}` for `y[n, c_in]`.
pub fn diffusion_conv(a: &Tensor, y: &Tensor, w: &DiffusionWeights) -> Result<Tensor> {
    check_adjacency(a)?;
    let k = w.forward.len().saturating_sub(1);
    if w.forward.is_empty() || w.reverse.len() != w.forward.len() {
        return Err(ForecastError::Config("need K+1 forward and reverse weights".into()));
    }
    let mut store = ParameterStore::new();
    for (dir, ws) in [(1, &w.forward), (2, &w.reverse)] {
        for (j, t) in ws.iter().enumerate() {
            store.insert(weight_name("conv", 0, "W", dir, j), t.clone())?;
        }
    }
    let (n, c) = (y.shape()[0], y.shape()[1]);
    let cout = w.forward[0].shape()[1];
    let mut g = Graph::new();
    let av = g.constant(a.clone())?;
    let sup = Supports::new(&mut g, av)?;
    let yv = g.constant(y.clone().reshape(vec![1, n, c])?)?;
    let wv = stacked_weight(&mut g, &store, "conv", 0, "W", k)?;
    let b = g.constant(Tensor::zeros(&[cout]))?;
    let out = diffusion_affine(&mut g, sup, yv, k, wv, b)?;
    Ok(g.value(out).clone().reshape(vec![n, cout])?)
}

/// Stacked weights of one DCGRU layer, loaded once per graph and reused at
/// every time step.
#[derive(Clone, Debug)]
pub struct CellVars {
    name: String,
    k: usize,
    w: [Var; 3],
    b: [Var; 3],
}

impl CellVars {
    pub fn load(g: &mut Graph, store: &ParameterStore, prefix: &str, layer: usize, k: usize) -> Result<Self> {
        let mut w = Vec::with_capacity(3);
        let mut b = Vec::with_capacity(3);
        for gate in GATES {
            w.push(stacked_weight(g, store, prefix, layer, gate, k)?);
            b.push(g.param(store, &bias_name(prefix, layer, gate))?);
        }
        Ok(Self {
            name: format!("{prefix}.l{layer}"),
            k,
            w: [w[0], w[1], w[2]],
            b: [b[0], b[1], b[2]],
        })
    }

    fn gate(&self, g: &mut Graph, sup: Supports, y: Var, idx: usize) -> Result<Var> {
        let gate = GATES[idx];
        let wrap = |source: TensorError| match source {
            TensorError::NonFinite { .. } => ForecastError::Gate {
                cell: self.name.clone(),
                gate,
                source,
            },
            other => ForecastError::Tensor(other),
        };
        let pre = match diffusion_affine(g, sup, y, self.k, self.w[idx], self.b[idx]) {
            Ok(v) => v,
            Err(ForecastError::Tensor(e)) => return Err(wrap(e)),
            Err(e) => return Err(e),
        };
        let act = if gate == "C" { g.tanh(pre) } else { g.sigmoid(pre) };
        act.map_err(wrap)
    }

    /// One recurrent step on `x[B, n, f]` and `h[B, n, hidden]`.
    pub fn step(&self, g: &mut Graph, sup: Supports, x: Var, h: Var) -> Result<StepVars> {
        let xh = g.concat(&[x, h], 2)?;
        let r = self.gate(g, sup, xh, 0)?;
        let u = self.gate(g, sup, xh, 1)?;
        let rh = g.mul(r, h)?;
        let xrh = g.concat(&[x, rh], 2)?;
        let c = self.gate(g, sup, xrh, 2)?;
        let keep = g.mul(u, h)?;
        let one_minus_u = g.one_minus(u)?;
        let write = g.mul(one_minus_u, c)?;
        let h = g.add(keep, write)?;
        Ok(StepVars { h, r, u, c })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h: Var,
    pub r: Var,
    pub u: Var,
    pub c: Var,
}

/// New hidden state and gate activations of one step, each `[n, hidden]`.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub h: Tensor,
    pub r: Tensor,
    pub u: Tensor,
    pub c: Tensor,
}

/// One DCGRU step outside of any training graph. `x[n, f]`, `h_prev[n, hidden]`.
pub fn dcgru_step(
    store: &ParameterStore,
    prefix: &str,
    layer: usize,
    k: usize,
    a: &Tensor,
    x: &Tensor,
    h_prev: &Tensor,
) -> Result<RecurrentState> {
    let mut g = Graph::new();
    let av = g.constant(a.clone())?;
    let sup = Supports::new(&mut g, av)?;
    let cell = CellVars::load(&mut g, store, prefix, layer, k)?;
    let lift = |g: &mut Graph, t: &Tensor| -> Result<Var> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        Ok(g.constant(t.clone().reshape(shape)?)?)
    };
    let xv = lift(&mut g, x)?;
    let hv = lift(&mut g, h_prev)?;
    let s = cell.step(&mut g, sup, xv, hv)?;
    let drop = |t: &Tensor| t.clone().reshape(t.shape()[1..].to_vec());
    Ok(RecurrentState {
        h: drop(g.value(s.h))?,
        r: drop(g.value(s.r))?,
        u: drop(g.value(s.u))?,
        c: drop(g.value(s.c))?,
    })
}

/// Encoder inputs and decoder targets of a batch of windows, laid out per
/// time step as `[B, n, features]`.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl WindowBatch {
    /// Build from `(input[F, T, n], target[F, τ, n])` pairs.
    pub fn new(fc: &Forecaster, windows: &[(Tensor, Tensor)]) -> Result<Self> {
        let bsz = windows.len();
        if bsz == 0 {
            return Err(ForecastError::Config("empty batch".into()));
        }
        let (f, t_in, n) = dims3(&windows[0].0);
        if t_in < fc.input_len {
            return Err(ForecastError::WindowTooShort {
                got: t_in,
                expected: fc.input_len,
            });
        }
        if f != fc.input_features {
            return Err(ForecastError::Config(format!(
                "window has {f} features, model expects {}",
                fc.input_features
            )));
        }
        let all: Vec<usize> = (0..f).collect();
        let offset = t_in - fc.input_len;
        let inputs = (0..fc.input_len)
            .map(|t| gather_step(windows.iter().map(|w| &w.0), bsz, n, t + offset, &all))
            .collect();
        let targets = (0..fc.horizon)
            .map(|t| gather_step(windows.iter().map(|w| &w.1), bsz, n, t, &fc.targets))
            .collect();
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn gather_step<'a>(
    windows: impl Iterator<Item = &'a Tensor>,
    bsz: usize,
    n: usize,
    t: usize,
    features: &[usize],
) -> Tensor {
    let mut data = Vec::with_capacity(bsz * n * features.len());
    for w in windows {
        let (_, len, _) = dims3(w);
        for i in 0..n {
            for &f in features {
                data.push(if t < len { w.at(&[f, t, i]) } else { 0.0 });
            }
        }
    }
    Tensor::new(vec![bsz, n, features.len()], data).expect("batch layout")
}

/// Run the encoder over the inputs and unroll the decoder for `horizon`
/// steps, each decoder step consuming the previous prediction. The first
/// decoder input is the last observed value of the target features.
/// Returns one `[B, n, targets]` prediction per horizon step.
pub fn forecast(
    g: &mut Graph,
    store: &ParameterStore,
    fc: &Forecaster,
    sup: Supports,
    inputs: &[Tensor],
) -> Result<Vec<Var>> {
    if inputs.len() < fc.input_len {
        return Err(ForecastError::WindowTooShort {
            got: inputs.len(),
            expected: fc.input_len,
        });
    }
    let inputs = &inputs[inputs.len() - fc.input_len..];
    let (bsz, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
    let h = fc.cell.hidden;
    let layers = fc.cell.layers;
    let enc: Vec<CellVars> = (0..layers)
        .map(|l| CellVars::load(g, store, ENCODER, l, fc.cell.k))
        .collect::<Result<_>>()?;
    let dec: Vec<CellVars> = (0..layers)
        .map(|l| CellVars::load(g, store, DECODER, l, fc.cell.k))
        .collect::<Result<_>>()?;
    let zero = g.constant(Tensor::zeros(&[bsz, n, h]))?;
    let mut state = vec![zero; layers];

    for x in inputs {
        let mut cur = g.constant(x.clone())?;
        for (l, cell) in enc.iter().enumerate() {
            state[l] = cell.step(g, sup, cur, state[l])?.h;
            cur = state[l];
        }
    }

    let last = inputs.last().expect("T >= 1");
    let fout = fc.output_features();
    let mut seed = Vec::with_capacity(bsz * n * fout);
    let fin = last.shape()[2];
    for row in last.data().chunks(fin) {
        seed.extend(fc.targets.iter().map(|&t| row[t]));
    }
    let mut prev = g.constant(Tensor::new(vec![bsz, n, fout], seed)?)?;
    let pw = g.param(store, PROJ_WEIGHT)?;
    let pb = g.param(store, PROJ_BIAS)?;
    let mut out = Vec::with_capacity(fc.horizon);
    for _ in 0..fc.horizon {
        let mut cur = prev;
        for (l, cell) in dec.iter().enumerate() {
            state[l] = cell.step(g, sup, cur, state[l])?.h;
            cur = state[l];
        }
        let flat = g.reshape(cur, &[bsz * n, h])?;
        let y = g.affine(flat, pw, pb)?;
        let y = g.reshape(y, &[bsz, n, fout])?;
        out.push(y);
        prev = y;
    }
    Ok(out)
}

/// Forecast a single window `input[F, T', n]` (`T' ≥ T`, the last `T` steps
/// are used) on a fixed adjacency. Returns `[targets, τ, n]`.
pub fn forecast_window(store: &ParameterStore, fc: &Forecaster, a: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (f, t, n) = dims3(input);
    if t < fc.input_len {
        return Err(ForecastError::WindowTooShort {
            got: t,
            expected: fc.input_len,
        });
    }
    let dummy = Tensor::zeros(&[f, 0, n]);
    let batch = WindowBatch::new(fc, &[(input.clone(), dummy)])?;
    let mut g = Graph::new();
    let av = g.constant(a.clone())?;
    let sup = Supports::new(&mut g, av)?;
    let preds = forecast(&mut g, store, fc, sup, &batch.inputs)?;
    let fout = fc.output_features();
    let mut out = Tensor::zeros(&[fout, fc.horizon, n]);
    for (step, p) in preds.iter().enumerate() {
        let v = g.value(*p);
        for i in 0..n {
            for q in 0..fout {
                out.set(&[q, step, i], v.at(&[0, i, q]));
            }
        }
    }
    Ok(out)
}
