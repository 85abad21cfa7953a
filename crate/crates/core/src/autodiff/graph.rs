//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. `backward`
//! walks the tape in reverse and accumulates gradients by summation, so a
//! parameter used at many time steps receives the sum of all contributions.

use std::collections::HashMap;

use super::{ParameterStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Add,
    Sub,
    Mul,
    Div,
    ScaleShift,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Abs,
    Clamp,
    MatMul,
    Transpose,
    Affine,
    Concat,
    Slice,
    Reshape,
    Sum,
    Mean,
    Conv1d,
    RowNormalize,
    NodeMix,
    GatherRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::ScaleShift => "scale_shift",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Abs => "abs",
            OpKind::Clamp => "clamp",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Affine => "affine",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Conv1d => "conv1d",
            OpKind::RowNormalize => "row_normalize",
            OpKind::NodeMix => "node_mix",
            OpKind::GatherRows => "gather_rows",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScaleShift { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MatMul(Var, Var),
    Transpose(Var),
    Affine { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv1d { x: Var, w: Var, b: Var, stride: usize },
    RowNormalize(Var),
    NodeMix { p: Var, y: Var },
    GatherRows { x: Var, index: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::Abs(_) => OpKind::Abs,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Affine { .. } => OpKind::Affine,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::RowNormalize(_) => OpKind::RowNormalize,
            Op::NodeMix { .. } => OpKind::NodeMix,
            Op::GatherRows { .. } => OpKind::GatherRows,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_names: Vec<(Var, String)>,
    fault: Option<(OpKind, f64)>,
}

/// Result of a backward pass: one optional gradient buffer per tape node.
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    param_names: Vec<(Var, String)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.per_node[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradients shaped like `store`; parameters not reached by the root get zeros.
    pub fn for_store(&self, store: &ParameterStore) -> ParameterStore {
        let mut out = store.zeros_like();
        for (var, name) in &self.param_names {
            if let (Some(g), Some(slot)) = (&self.per_node[var.0], out.get_mut(name)) {
                for (d, s) in slot.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        out
    }
}


fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: format!("expected rank {rank}"),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl Fn(usize) -> f64) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    for (i, b) in buf.iter_mut().enumerate() {
        *b += f(i);
    }
}

fn accumulate_vec(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// `a[m,k] @ b[k,n]` into a fresh buffer.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `a[m,k] @ b[n,k]^T`.
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]^T @ b[k,n]`.
fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += api * bv;
            }
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scale the backward contribution of every `kind` op by `factor`.
    /// Only meant for exercising the gradient checker.
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op.kind().name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; receives no gradient bookkeeping.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Load a named parameter. Repeated loads return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Param, true)?;
        self.params.insert(name.to_string(), v);
        self.param_names.push((v, name.to_string()));
        Ok(v)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tb.is_scalar() {
            let y = tb.item();
            return Ok(ta.map(|x| f(x, y)));
        }
        if ta.is_scalar() {
            let x = ta.item();
            return Ok(tb.map(|y| f(x, y)));
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b), rg)
    }

    /// `scale * x + shift` with scalar constants.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(x).map(|e| scale * e + shift);
        let rg = self.rg(&[x]);
        self.push(v, Op::ScaleShift { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.scale_shift(x, scale, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.scale_shift(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push(v, Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_rank("matmul", ta, 2)?;
        check_rank("matmul", tb, 2)?;
        let (m, k, k2, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_rank("transpose", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg)
    }

    /// Fully connected layer `x[m,k] @ w[k,n] + b[n]`, bias added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        check_rank("affine", tx, 2)?;
        check_rank("affine", tw, 2)?;
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tw.shape()[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        if tb.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: tw.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = matmul_raw(tx.data(), tw.data(), m, k, n);
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::Affine { x, w, b }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: t.shape().to_vec(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Valid 1-D convolution along the last axis.
    /// `x[N, Cin, L]`, `w[Cout, Cin, k]`, `b[Cout]` give `[N, Cout, (L-k)/stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        check_rank("conv1d", tx, 3)?;
        check_rank("conv1d", tw, 3)?;
        let (n, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin_w, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if cin != cin_w || tb.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        if stride == 0 || len < k {
            return Err(TensorError::InvalidShape {
                op: "conv1d",
                shape: tx.shape().to_vec(),
                reason: format!("sequence length {len} shorter than kernel {k} or zero stride"),
            });
        }
        let lout = (len - k) / stride + 1;
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut data = vec![0.0; n * cout * lout];
        for s in 0..n {
            for o in 0..cout {
                let out = &mut data[(s * cout + o) * lout..(s * cout + o + 1) * lout];
                out.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..cin {
                    let xs = &xd[(s * cin + c) * len..(s * cin + c + 1) * len];
                    let ws = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                    for (t, ov) in out.iter_mut().enumerate() {
                        let xw = &xs[t * stride..t * stride + k];
                        *ov += xw.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(
            Tensor::new(vec![n, cout, lout], data)?,
            Op::Conv1d { x, w, b, stride },
            rg,
        )
    }

    /// Divide each row by its sum; rows summing to exactly zero stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_rank("row_normalize", t, 2)?;
        let c = t.shape()[1];
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::RowNormalize(x), rg)
    }

    /// Apply a node-mixing matrix to every batch slice: `out[b] = p[n,n] @ y[b]`
    /// with `y[B, n, c]`.
    pub fn node_mix(&mut self, p: Var, y: Var) -> Result<Var> {
        let (tp, ty) = (self.value(p), self.value(y));
        check_rank("node_mix", tp, 2)?;
        check_rank("node_mix", ty, 3)?;
        let (bsz, n, c) = (ty.shape()[0], ty.shape()[1], ty.shape()[2]);
        if tp.shape() != [n, n] {
            return Err(TensorError::ShapeMismatch {
                op: "node_mix",
                lhs: tp.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(bsz * n * c);
        for b in 0..bsz {
            let ys = &ty.data()[b * n * c..(b + 1) * n * c];
            data.extend(matmul_raw(tp.data(), ys, n, n, c));
        }
        let shape = ty.shape().to_vec();
        let rg = self.rg(&[p, y]);
        self.push(Tensor::new(shape, data)?, Op::NodeMix { p, y }, rg)
    }

    /// Select rows of a matrix: `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check_rank("gather_rows", t, 2)?;
        let (m, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
                reason: format!("row {bad} out of range"),
            });
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![index.len(), c], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let g = match self.fault {
                Some((kind, factor)) if kind == node.op.kind() => {
                    g.iter().map(|v| v * factor).collect()
                }
                _ => g,
            };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes[..=root.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let param_names = self
            .param_names
            .iter()
            .filter(|(v, _)| v.0 <= root.0)
            .cloned()
            .collect();
        Ok(Gradients {
            per_node: grads,
            shapes,
            param_names,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a broadcasting binary op onto one operand.
    fn reduce_to(&self, target: Var, other: Var, contrib: Vec<f64>) -> Vec<f64> {
        if self.value(target).is_scalar() && !self.value(other).is_scalar() {
            vec![contrib.iter().sum()]
        } else {
            contrib
        }
    }

    fn operand_at(&self, v: Var, i: usize) -> f64 {
        let t = self.value(v);
        if t.is_scalar() {
            t.item()
        } else {
            t.data()[i]
        }
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(a) {
                    let c = self.reduce_to(a, b, g.to_vec());
                    accumulate_vec(&mut grads[a.0], c);
                }
                if self.wants(b) {
                    let c = self.reduce_to(b, a, g.iter().map(|v| sign * v).collect());
                    accumulate_vec(&mut grads[b.0], c);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let c = (0..g.len()).map(|i| g[i] * self.operand_at(b, i)).collect();
                    let c = self.reduce_to(a, b, c);
                    accumulate_vec(&mut grads[a.0], c);
                }
                if self.wants(b) {
                    let c = (0..g.len()).map(|i| g[i] * self.operand_at(a, i)).collect();
                    let c = self.reduce_to(b, a, c);
                    accumulate_vec(&mut grads[b.0], c);
                }
            }
            &Op::Div(a, b) => {
                if self.wants(a) {
                    let c = (0..g.len()).map(|i| g[i] / self.operand_at(b, i)).collect();
                    let c = self.reduce_to(a, b, c);
                    accumulate_vec(&mut grads[a.0], c);
                }
                if self.wants(b) {
                    let c = (0..g.len())
                        .map(|i| {
                            let d = self.operand_at(b, i);
                            -g[i] * self.operand_at(a, i) / (d * d)
                        })
                        .collect();
                    let c = self.reduce_to(b, a, c);
                    accumulate_vec(&mut grads[b.0], c);
                }
            }
            &Op::ScaleShift { x, scale } => {
                accumulate(&mut grads[x.0], g.len(), |i| g[i] * scale);
            }
            &Op::Sigmoid(x) => {
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |i| g[i] * y[i] * (1.0 - y[i]));
            }
            &Op::Tanh(x) => {
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |i| g[i] * (1.0 - y[i] * y[i]));
            }
            &Op::Log(x) => {
                let xv = self.value(x).data();
                accumulate(&mut grads[x.0], g.len(), |i| g[i] / xv[i]);
            }
            &Op::Exp(x) => {
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |i| g[i] * y[i]);
            }
            &Op::Abs(x) => {
                let xv = self.value(x).data();
                accumulate(&mut grads[x.0], g.len(), |i| {
                    if xv[i] > 0.0 {
                        g[i]
                    } else if xv[i] < 0.0 {
                        -g[i]
                    } else {
                        0.0
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = self.value(x).data();
                accumulate(&mut grads[x.0], g.len(), |i| {
                    if xv[i] >= lo && xv[i] <= hi {
                        g[i]
                    } else {
                        0.0
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(a) {
                    accumulate_vec(&mut grads[a.0], matmul_bt(g, tb.data(), m, n, k));
                }
                if self.wants(b) {
                    accumulate_vec(&mut grads[b.0], matmul_at(ta.data(), g, m, k, n));
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut back = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        back[i * c + j] = g[j * r + i];
                    }
                }
                accumulate_vec(&mut grads[x.0], back);
            }
            &Op::Affine { x, w, b } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                if self.wants(x) {
                    accumulate_vec(&mut grads[x.0], matmul_bt(g, tw.data(), m, n, k));
                }
                if self.wants(w) {
                    accumulate_vec(&mut grads[w.0], matmul_at(tx.data(), g, m, k, n));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate_vec(&mut grads[b.0], gb);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if self.wants(p) {
                        let mut back = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * total + offset;
                            back.extend_from_slice(&g[base..base + block]);
                        }
                        accumulate_vec(&mut grads[p.0], back);
                    }
                    offset += block;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(x), axis);
                let len = out.shape()[axis];
                let buf = grads[x.0].get_or_insert_with(|| vec![0.0; outer * extent * inner]);
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in buf[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            &Op::Reshape(x) => accumulate_vec(&mut grads[x.0], g.to_vec()),
            &Op::Sum(x) => {
                let len = self.value(x).len();
                accumulate(&mut grads[x.0], len, |_| g[0]);
            }
            &Op::Mean(x) => {
                let len = self.value(x).len();
                accumulate(&mut grads[x.0], len, |_| g[0] / len as f64);
            }
            &Op::Conv1d { x, w, b, stride } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (n, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                let lout = out.shape()[2];
                let (xd, wd) = (tx.data(), tw.data());
                if self.wants(b) {
                    let mut gb = vec![0.0; cout];
                    for s in 0..n {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            *gbo += g[(s * cout + o) * lout..(s * cout + o + 1) * lout]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    accumulate_vec(&mut grads[b.0], gb);
                }
                if self.wants(w) {
                    let mut gw = vec![0.0; cout * cin * k];
                    for s in 0..n {
                        for o in 0..cout {
                            let go = &g[(s * cout + o) * lout..(s * cout + o + 1) * lout];
                            for c in 0..cin {
                                let xs = &xd[(s * cin + c) * len..(s * cin + c + 1) * len];
                                for j in 0..k {
                                    gw[(o * cin + c) * k + j] += go
                                        .iter()
                                        .enumerate()
                                        .map(|(t, gv)| gv * xs[t * stride + j])
                                        .sum::<f64>();
                                }
                            }
                        }
                    }
                    accumulate_vec(&mut grads[w.0], gw);
                }
                if self.wants(x) {
                    let mut gx = vec![0.0; n * cin * len];
                    for s in 0..n {
                        for o in 0..cout {
                            let go = &g[(s * cout + o) * lout..(s * cout + o + 1) * lout];
                            for c in 0..cin {
                                let ws = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                                let gxs = &mut gx[(s * cin + c) * len..(s * cin + c + 1) * len];
                                for (t, gv) in go.iter().enumerate() {
                                    for (j, wv) in ws.iter().enumerate() {
                                        gxs[t * stride + j] += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate_vec(&mut grads[x.0], gx);
                }
            }
            &Op::RowNormalize(x) => {
                let tx = self.value(x);
                let c = tx.shape()[1];
                let y = out.data();
                let mut back = vec![0.0; tx.len()];
                for (r, xrow) in tx.data().chunks(c).enumerate() {
                    let s: f64 = xrow.iter().sum();
                    if s == 0.0 {
                        continue;
                    }
                    let gr = &g[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        back[r * c + j] = (gr[j] - dot) / s;
                    }
                }
                accumulate_vec(&mut grads[x.0], back);
            }
            &Op::NodeMix { p, y } => {
                let (tp, ty) = (self.value(p), self.value(y));
                let (bsz, n, c) = (ty.shape()[0], ty.shape()[1], ty.shape()[2]);
                if self.wants(p) {
                    let mut gp = vec![0.0; n * n];
                    for b in 0..bsz {
                        let gb = &g[b * n * c..(b + 1) * n * c];
                        let yb = &ty.data()[b * n * c..(b + 1) * n * c];
                        for (acc, v) in gp.iter_mut().zip(matmul_bt(gb, yb, n, c, n)) {
                            *acc += v;
                        }
                    }
                    accumulate_vec(&mut grads[p.0], gp);
                }
                if self.wants(y) {
                    let mut gy = Vec::with_capacity(bsz * n * c);
                    for b in 0..bsz {
                        let gb = &g[b * n * c..(b + 1) * n * c];
                        gy.extend(matmul_at(tp.data(), gb, n, n, c));
                    }
                    accumulate_vec(&mut grads[y.0], gy);
                }
            }
            Op::GatherRows { x, index } => {
                let t = self.value(*x);
                let c = t.shape()[1];
                let buf = grads[x.0].get_or_insert_with(|| vec![0.0; t.len()]);
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        buf[i * c + j] += g[r * c + j];
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Run `program` on a fresh tape and return the root value with parameter gradients.
pub fn evaluate_with_gradients<F>(
    params: &ParameterStore,
    program: F,
) -> Result<(f64, ParameterStore)>
where
    F: FnOnce(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = program(&mut g, params)?;
    let value = g.value(root).data()[0];
    let grads = g.backward(root)?;
    Ok((value, grads.for_store(params)))
}
