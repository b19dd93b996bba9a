//! Reverse-mode differentiation over tensor operations.
//!
//! Model code is written once against the [`Exec`] trait. [`Eager`] evaluates
//! operations directly; [`Tape`] evaluates the same kernels and records each
//! operation so that [`Tape::backward`] can propagate gradients to the named
//! parameters of a [`ParameterStore`]. Both executors produce bit-identical
//! forward values.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::attention::{attention_core, attention_core_backward};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gelu, gelu_grad, layer_norm_row, matmul_into, Tensor};

/// A recordable tensor operation. Inputs are passed positionally to
/// [`Op::forward`] / [`Op::backward`].
#[derive(Debug, Clone)]
pub enum Op {
    /// `a + b`, equal shapes.
    Add,
    /// Elementwise `a * b`, equal shapes.
    Mul,
    /// `x[..., K] · w[K, P] (+ b[P])`.
    Dense,
    /// `[x, gamma, beta]`, normalization over the last axis.
    LayerNorm { eps: f64 },
    Gelu,
    /// Row gather from `table[R, D]`; output shape is `shape ++ [D]`.
    Embed { symbols: Arc<[u32]>, shape: Vec<usize> },
    /// `[row[H, D], col[W, D]]` → `out[i, j] = row[i] + col[j]`.
    PositionGrid,
    /// Shift by one slice along `axis`, zero-filled.
    Shift { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    /// `[q, k, v]` scaled dot-product attention along `seq_axis`.
    Attention { heads: usize, seq_axis: usize, masked: bool },
    /// Mean over positions of `-log2 softmax(logits)[target]`; scalar output.
    BitsLoss { targets: Arc<[u32]> },
    /// Sum of all elements; scalar output.
    Sum,
}

fn expect_inputs(inputs: &[&Tensor], n: usize, op: &'static str) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Usage(format!("{op} expects {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// `-log2 softmax(logits)[target]`.
pub fn symbol_bits(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    z.log2() - (logits[target] - max) * std::f64::consts::LOG2_E
}

impl Op {
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match self {
            Op::Add => {
                expect_inputs(inputs, 2, "add")?;
                inputs[0].add(inputs[1])
            }
            Op::Mul => {
                expect_inputs(inputs, 2, "mul")?;
                inputs[0].mul(inputs[1])
            }
            Op::Dense => dense_forward(inputs),
            Op::LayerNorm { eps } => {
                expect_inputs(inputs, 3, "layer_norm")?;
                inputs[0].normalize_lastaxis(inputs[1], inputs[2], *eps)
            }
            Op::Gelu => {
                expect_inputs(inputs, 1, "gelu")?;
                Ok(inputs[0].map(gelu))
            }
            Op::Embed { symbols, shape } => {
                expect_inputs(inputs, 1, "embed")?;
                embed_forward(inputs[0], symbols, shape)
            }
            Op::PositionGrid => {
                expect_inputs(inputs, 2, "position_grid")?;
                position_grid_forward(inputs[0], inputs[1])
            }
            Op::Shift { axis } => {
                expect_inputs(inputs, 1, "shift")?;
                inputs[0].shift(*axis, 1)
            }
            Op::Narrow { axis, start, len } => {
                expect_inputs(inputs, 1, "narrow")?;
                inputs[0].narrow(*axis, *start, *len)
            }
            Op::Attention { heads, seq_axis, masked } => {
                expect_inputs(inputs, 3, "attention")?;
                attention_core(inputs[0], inputs[1], inputs[2], *heads, *seq_axis, *masked)
            }
            Op::BitsLoss { targets } => {
                expect_inputs(inputs, 1, "bits_loss")?;
                bits_loss_forward(inputs[0], targets)
            }
            Op::Sum => {
                expect_inputs(inputs, 1, "sum")?;
                Ok(Tensor::scalar(inputs[0].sum()))
            }
        }
    }

    /// Gradients with respect to each input, given the gradient of the output.
    pub fn backward(&self, inputs: &[&Tensor], grad: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            Op::Add => Ok(vec![grad.clone(), grad.clone()]),
            Op::Mul => Ok(vec![grad.mul(inputs[1])?, grad.mul(inputs[0])?]),
            Op::Dense => dense_backward(inputs, grad),
            Op::LayerNorm { eps } => layer_norm_backward(inputs, grad, *eps),
            Op::Gelu => Ok(vec![grad.mul(&inputs[0].map(gelu_grad))?]),
            Op::Embed { symbols, .. } => {
                let table = inputs[0];
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.numel()];
                for (p, &s) in symbols.iter().enumerate() {
                    let s = s as usize;
                    for (a, &g) in dt[s * d..(s + 1) * d].iter_mut().zip(&grad.data()[p * d..(p + 1) * d]) {
                        *a += g;
                    }
                }
                Ok(vec![Tensor::from_parts(table.shape().to_vec(), dt)])
            }
            Op::PositionGrid => {
                let (h, w, d) = (inputs[0].shape()[0], inputs[1].shape()[0], inputs[0].shape()[1]);
                let mut dr = vec![0.0; h * d];
                let mut dc = vec![0.0; w * d];
                let g = grad.data();
                for i in 0..h {
                    for j in 0..w {
                        for t in 0..d {
                            let v = g[(i * w + j) * d + t];
                            dr[i * d + t] += v;
                            dc[j * d + t] += v;
                        }
                    }
                }
                Ok(vec![
                    Tensor::from_parts(vec![h, d], dr),
                    Tensor::from_parts(vec![w, d], dc),
                ])
            }
            Op::Shift { axis } => Ok(vec![grad.shift(*axis, -1)?]),
            Op::Narrow { axis, start, len } => {
                let x = inputs[0];
                let mut out = vec![0.0; x.numel()];
                let outer: usize = x.shape()[..*axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let extent = x.shape()[*axis];
                let g = grad.data();
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                Ok(vec![Tensor::from_parts(x.shape().to_vec(), out)])
            }
            Op::Attention { heads, seq_axis, masked } => {
                let (dq, dk, dv) = attention_core_backward(
                    inputs[0], inputs[1], inputs[2], grad, *heads, *seq_axis, *masked,
                )?;
                Ok(vec![dq, dk, dv])
            }
            Op::BitsLoss { targets } => {
                let logits = inputs[0];
                let v = *logits.shape().last().expect("rank >= 1");
                let n = targets.len();
                let scale = grad.item() * std::f64::consts::LOG2_E / n as f64;
                let mut out = vec![0.0; logits.numel()];
                for (p, &t) in targets.iter().enumerate() {
                    let row = &logits.data()[p * v..(p + 1) * v];
                    let dst = &mut out[p * v..(p + 1) * v];
                    dst.copy_from_slice(row);
                    crate::tensor::softmax_in_place(dst);
                    dst[t as usize] -= 1.0;
                    for x in dst.iter_mut() {
                        *x *= scale;
                    }
                }
                Ok(vec![Tensor::from_parts(logits.shape().to_vec(), out)])
            }
            Op::Sum => Ok(vec![Tensor::full(inputs[0].shape(), grad.item())]),
        }
    }
}

fn dense_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() != 2 && inputs.len() != 3 {
        return Err(Error::Usage("dense expects 2 or 3 inputs".into()));
    }
    let (x, w) = (inputs[0], inputs[1]);
    let k = *x.shape().last().expect("rank >= 1");
    if w.rank() != 2 || w.shape()[0] != k {
        return Err(Error::shape("dense", x.shape(), w.shape()));
    }
    let p = w.shape()[1];
    let m = x.numel() / k;
    let mut out = vec![0.0; m * p];
    matmul_into(x.data(), w.data(), m, k, p, &mut out);
    if let Some(b) = inputs.get(2) {
        if b.shape() != [p] {
            return Err(Error::shape("dense bias", b.shape(), &[p]));
        }
        for row in out.chunks_exact_mut(p) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = p;
    Ok(Tensor::from_parts(shape, out))
}

fn dense_backward(inputs: &[&Tensor], grad: &Tensor) -> Result<Vec<Tensor>> {
    let (x, w) = (inputs[0], inputs[1]);
    let (k, p) = (w.shape()[0], w.shape()[1]);
    let m = x.numel() / k;
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut dx = vec![0.0; m * k];
    let mut dw = vec![0.0; k * p];
    for i in 0..m {
        let g = &gd[i * p..(i + 1) * p];
        for kk in 0..k {
            let wrow = &wd[kk * p..(kk + 1) * p];
            let mut s = 0.0;
            for (a, b) in g.iter().zip(wrow) {
                s += a * b;
            }
            dx[i * k + kk] = s;
            let xik = xd[i * k + kk];
            for (d, &gv) in dw[kk * p..(kk + 1) * p].iter_mut().zip(g) {
                *d += xik * gv;
            }
        }
    }
    let mut out = vec![
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![k, p], dw),
    ];
    if inputs.len() == 3 {
        let mut db = vec![0.0; p];
        for g in gd.chunks_exact(p) {
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
        }
        out.push(Tensor::from_parts(vec![p], db));
    }
    Ok(out)
}

fn layer_norm_backward(inputs: &[&Tensor], grad: &Tensor, eps: f64) -> Result<Vec<Tensor>> {
    let (x, gamma) = (inputs[0], inputs[1]);
    let d = gamma.numel();
    let mut dx = vec![0.0; x.numel()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let ones = vec![1.0; d];
    let zeros = vec![0.0; d];
    for ((xr, gr), dxr) in x
        .data()
        .chunks_exact(d)
        .zip(grad.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        layer_norm_row(xr, &ones, &zeros, eps, &mut xhat);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for t in 0..d {
            let dxhat = gr[t] * gamma.data()[t];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[t];
            dg[t] += gr[t] * xhat[t];
            db[t] += gr[t];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for t in 0..d {
            let dxhat = gr[t] * gamma.data()[t];
            dxr[t] = rstd * (dxhat - mean_dxhat - xhat[t] * mean_dxhat_xhat);
        }
    }
    Ok(vec![
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dg),
        Tensor::from_parts(vec![d], db),
    ])
}

fn embed_forward(table: &Tensor, symbols: &[u32], shape: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 || shape.iter().product::<usize>() != symbols.len() {
        return Err(Error::shape("embed", table.shape(), shape));
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(symbols.len() * d);
    for &s in symbols {
        let s = s as usize;
        if s >= rows {
            return Err(Error::Usage(format!("symbol {s} outside embedding table of {rows} rows")));
        }
        out.extend_from_slice(&table.data()[s * d..(s + 1) * d]);
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(d);
    Ok(Tensor::from_parts(out_shape, out))
}

fn position_grid_forward(row: &Tensor, col: &Tensor) -> Result<Tensor> {
    if row.rank() != 2 || col.rank() != 2 || row.shape()[1] != col.shape()[1] {
        return Err(Error::shape("position_grid", row.shape(), col.shape()));
    }
    let (h, w, d) = (row.shape()[0], col.shape()[0], row.shape()[1]);
    let mut out = Vec::with_capacity(h * w * d);
    for i in 0..h {
        let r = &row.data()[i * d..(i + 1) * d];
        for j in 0..w {
            let c = &col.data()[j * d..(j + 1) * d];
            out.extend(r.iter().zip(c).map(|(a, b)| a + b));
        }
    }
    Ok(Tensor::from_parts(vec![h, w, d], out))
}

fn bits_loss_forward(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let v = *logits.shape().last().expect("rank >= 1");
    if logits.numel() / v != targets.len() {
        return Err(Error::shape("bits_loss", logits.shape(), &[targets.len()]));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks_exact(v).zip(targets) {
        if t as usize >= v {
            return Err(Error::Usage(format!("target {t} outside vocabulary of {v}")));
        }
        total += symbol_bits(row, t as usize);
    }
    let loss = total / targets.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    Ok(Tensor::scalar(loss))
}

/// Executor for model code: either direct evaluation or tape recording.
pub trait Exec {
    type Var: Clone;

    fn param(&mut self, name: &str) -> Result<Self::Var>;
    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var>;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Add, &[a, b])
    }

    fn dense(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var> {
        match b {
            Some(b) => self.apply(Op::Dense, &[x, w, b]),
            None => self.apply(Op::Dense, &[x, w]),
        }
    }

    fn layer_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::LayerNorm { eps: LAYER_NORM_EPS }, &[x, gamma, beta])
    }

    fn gelu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Gelu, &[x])
    }

    fn embed(&mut self, table: &Self::Var, symbols: &[u32], shape: &[usize]) -> Result<Self::Var> {
        self.apply(
            Op::Embed { symbols: symbols.into(), shape: shape.to_vec() },
            &[table],
        )
    }

    fn position_grid(&mut self, row: &Self::Var, col: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::PositionGrid, &[row, col])
    }

    fn shift(&mut self, x: &Self::Var, axis: usize) -> Result<Self::Var> {
        self.apply(Op::Shift { axis }, &[x])
    }

    fn narrow(&mut self, x: &Self::Var, axis: usize, start: usize, len: usize) -> Result<Self::Var> {
        self.apply(Op::Narrow { axis, start, len }, &[x])
    }

    fn attention(
        &mut self,
        q: &Self::Var,
        k: &Self::Var,
        v: &Self::Var,
        heads: usize,
        seq_axis: usize,
        masked: bool,
    ) -> Result<Self::Var> {
        self.apply(Op::Attention { heads, seq_axis, masked }, &[q, k, v])
    }

    fn bits_loss(&mut self, logits: &Self::Var, targets: &[u32]) -> Result<Self::Var> {
        self.apply(Op::BitsLoss { targets: targets.into() }, &[logits])
    }

    fn sum(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum, &[x])
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Direct evaluation against a parameter store.
pub struct Eager<'s> {
    store: &'s ParameterStore,
}

impl<'s> Eager<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self { store }
    }
}

impl Exec for Eager<'_> {
    type Var = Tensor;

    fn param(&mut self, name: &str) -> Result<Tensor> {
        self.store.value(name).cloned()
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        op.forward(inputs)
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum NodeKind {
    Param(String),
    Constant,
    Op(Op, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    value: Tensor,
    needs_grad: bool,
}

/// Records operations in evaluation order. Each parameter enters the tape
/// once, however often it is used.
pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Re-evaluates every recorded operation from the leaf values and returns
    /// the value of `v`.
    pub fn replay(&self, v: Var) -> Result<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(v.0 + 1);
        for node in &self.nodes[..=v.0] {
            let value = match &node.kind {
                NodeKind::Param(_) | NodeKind::Constant => node.value.clone(),
                NodeKind::Op(op, inputs) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| &values[i]).collect();
                    op.forward(&ins)?
                }
            };
            values.push(value);
        }
        Ok(values.pop().expect("non-empty"))
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.kind {
                NodeKind::Param(name) => out.accumulate(name, &g)?,
                NodeKind::Constant => {}
                NodeKind::Op(op, inputs) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    let input_grads = op.backward(&ins, &g)?;
                    for (&i, ig) in inputs.iter().zip(input_grads) {
                        if !self.nodes[i].needs_grad {
                            continue;
                        }
                        grads[i] = Some(match grads[i].take() {
                            Some(acc) => acc.add(&ig)?,
                            None => ig,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Exec for Tape<'_> {
    type Var = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var(i));
        }
        let value = self.store.value(name)?.clone();
        self.nodes.push(Node { kind: NodeKind::Param(name.to_string()), value, needs_grad: true });
        let i = self.nodes.len() - 1;
        self.params.insert(name.to_string(), i);
        Ok(Var(i))
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { kind: NodeKind::Constant, value: t, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&ins)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.nodes.push(Node { kind: NodeKind::Op(op, idx), value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}

/// Named gradient tensors produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(acc) => *acc = acc.add(g)?,
            None => {
                self.entries.insert(name.to_string(), g.clone());
            }
        }
        Ok(())
    }

    /// Adds every entry of `other`.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in other.iter() {
            self.accumulate(name, g)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.entries.values_mut() {
            *g = g.scale(s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        Self { grad: z.clone(), m: z.clone(), v: z, value }
    }
}

/// Trainable parameters by unique name, each with a gradient accumulator and
/// Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), Parameter::new(value));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.grad)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::shape("set_moments", p.value.shape(), m.shape()));
        }
        p.m = m;
        p.v = v;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            p.grad = p.grad.add(g)?;
        }
        Ok(())
    }

    pub fn map_values(&mut self, f: impl Fn(f64) -> f64) {
        for p in self.entries.values_mut() {
            p.value = p.value.map(&f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update using the accumulated gradients. `t` is the
/// 1-based step index.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig, t: u64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for p in store.entries.values_mut() {
        let n = p.value.numel();
        let mut w = std::mem::replace(&mut p.value, Tensor::scalar(0.0)).into_vec();
        let mut m = std::mem::replace(&mut p.m, Tensor::scalar(0.0)).into_vec();
        let mut v = std::mem::replace(&mut p.v, Tensor::scalar(0.0)).into_vec();
        let g = p.grad.data();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        let shape = p.grad.shape().to_vec();
        p.value = Tensor::from_parts(shape.clone(), w);
        p.m = Tensor::from_parts(shape.clone(), m);
        p.v = Tensor::from_parts(shape, v);
    }
}

/// Compares tape gradients of `f` with central finite differences on up to
/// `coords_per_param` coordinates of each parameter. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(
    store: &ParameterStore,
    f: F,
    step: f64,
    coords_per_param: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(&loss).item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (name, p) in store.iter() {
        let n = p.value.numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.below(n)).collect()
        };
        for c in coords {
            let mut plus = p.value.to_vec();
            let mut minus = plus.clone();
            plus[c] += step;
            minus[c] -= step;
            probe.set_value(name, Tensor::from_parts(p.value.shape().to_vec(), plus))?;
            let fp = eval(&probe)?;
            probe.set_value(name, Tensor::from_parts(p.value.shape().to_vec(), minus))?;
            let fm = eval(&probe)?;
            probe.set_value(name, p.value.clone())?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[c]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (n, t) in entries {
            s.insert(n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn square_gradient() {
        let store = store_with(&[("w", Tensor::scalar(3.0))]);
        let mut tape = Tape::new(&store);
        let w = tape.param("w").unwrap();
        let sq = tape.apply(Op::Mul, &[&w, &w]).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get("w").unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        // With q = v = 1 every attention output is the sum of one softmax row
        // over scores w.
        let mut rng = Rng::new(4);
        let w = Tensor::randn(&[1, 3, 1], 1.0, &mut rng);
        let store = store_with(&[("w", w)]);
        let mut tape = Tape::new(&store);
        let w = tape.param("w").unwrap();
        let q = tape.constant(Tensor::full(&[1, 3, 1], 1.0));
        let v = tape.constant(Tensor::full(&[1, 3, 1], 1.0));
        let out = tape.attention(&q, &w, &v, 1, 1, false).unwrap();
        let s = tape.sum(&out).unwrap();
        assert!((tape.value(&s).item() - 3.0).abs() < 1e-12);
        let g = tape.backward(s).unwrap();
        assert!(g.get("w").unwrap().data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let store = store_with(&[("w", Tensor::zeros(&[2]))]);
        let mut tape = Tape::new(&store);
        let w = tape.param("w").unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn accumulation_is_additive_and_unreached_stay_zero() {
        let mut store = store_with(&[("w", Tensor::scalar(1.5)), ("unused", Tensor::scalar(2.0))]);
        for _ in 0..2 {
            let grads = {
                let mut tape = Tape::new(&store);
                let w = tape.param("w").unwrap();
                let sq = tape.apply(Op::Mul, &[&w, &w]).unwrap();
                tape.backward(sq).unwrap()
            };
            store.accumulate(&grads).unwrap();
        }
        assert_eq!(store.grad("w").unwrap().item(), 6.0);
        assert_eq!(store.grad("unused").unwrap().item(), 0.0);
        store.zero_grads();
        assert_eq!(store.grad("w").unwrap().item(), 0.0);
    }

    #[test]
    fn replay_reproduces_loss() {
        let mut rng = Rng::new(2);
        let store = store_with(&[
            ("x", Tensor::randn(&[2, 3, 4], 1.0, &mut rng)),
            ("w", Tensor::randn(&[4, 5], 1.0, &mut rng)),
            ("b", Tensor::randn(&[5], 1.0, &mut rng)),
        ]);
        let mut tape = Tape::new(&store);
        let x = tape.param("x").unwrap();
        let w = tape.param("w").unwrap();
        let b = tape.param("b").unwrap();
        let y = tape.dense(&x, &w, Some(&b)).unwrap();
        let loss = tape.bits_loss(&y, &[0, 1, 2, 3, 4, 0]).unwrap();
        let replayed = tape.replay(loss).unwrap();
        assert!(replayed.bit_eq(tape.value(&loss)));
    }

    #[test]
    fn quadratic_grad_check() {
        let mut rng = Rng::new(3);
        let store = store_with(&[("w", Tensor::randn(&[5], 1.0, &mut rng))]);
        let err = grad_check(
            &store,
            |t| {
                let w = t.param("w")?;
                let sq = t.apply(Op::Mul, &[&w, &w])?;
                t.sum(&sq)
            },
            1e-5,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    fn op_check(build: impl Fn(&mut Tape<'_>) -> Result<Var>, store: &ParameterStore) {
        let mut rng = Rng::new(99);
        let err = grad_check(store, build, 1e-5, 64, &mut rng).unwrap();
        assert!(err < 1e-6, "grad check error {err}");
    }

    /// Turns an arbitrary tensor into a scalar with non-trivial gradient.
    fn weighted_sum<'s>(t: &mut Tape<'s>, x: Var, rng_seed: u64) -> Result<Var> {
        let shape = t.value(&x).shape().to_vec();
        let mut rng = Rng::new(rng_seed);
        let w = t.constant(Tensor::randn(&shape, 1.0, &mut rng));
        let p = t.apply(Op::Mul, &[&x, &w])?;
        t.sum(&p)
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = Rng::new(5);
        let store = store_with(&[
            ("x", Tensor::randn(&[2, 3, 4], 1.0, &mut rng)),
            ("y", Tensor::randn(&[2, 3, 4], 1.0, &mut rng)),
            ("w", Tensor::randn(&[4, 4], 0.5, &mut rng)),
            ("b", Tensor::randn(&[4], 0.5, &mut rng)),
            ("g", Tensor::randn(&[4], 1.0, &mut rng)),
            ("t", Tensor::randn(&[5, 4], 1.0, &mut rng)),
            ("row", Tensor::randn(&[2, 4], 1.0, &mut rng)),
            ("col", Tensor::randn(&[3, 4], 1.0, &mut rng)),
        ]);
        op_check(|t| { let (x, y) = (t.param("x")?, t.param("y")?); let z = t.add(&x, &y)?; weighted_sum(t, z, 1) }, &store);
        op_check(|t| { let (x, y) = (t.param("x")?, t.param("y")?); let z = t.apply(Op::Mul, &[&x, &y])?; weighted_sum(t, z, 1) }, &store);
        op_check(|t| { let (x, w, b) = (t.param("x")?, t.param("w")?, t.param("b")?); let z = t.dense(&x, &w, Some(&b))?; weighted_sum(t, z, 2) }, &store);
        op_check(|t| { let (x, g, b) = (t.param("x")?, t.param("g")?, t.param("b")?); let z = t.layer_norm(&x, &g, &b)?; weighted_sum(t, z, 3) }, &store);
        op_check(|t| { let x = t.param("x")?; let z = t.gelu(&x)?; weighted_sum(t, z, 4) }, &store);
        op_check(|t| { let tb = t.param("t")?; let z = t.embed(&tb, &[0, 4, 4, 2, 1, 0], &[2, 3])?; weighted_sum(t, z, 5) }, &store);
        op_check(|t| { let (r, c) = (t.param("row")?, t.param("col")?); let z = t.position_grid(&r, &c)?; weighted_sum(t, z, 6) }, &store);
        for axis in 0..3 {
            op_check(|t| { let x = t.param("x")?; let z = t.shift(&x, axis)?; weighted_sum(t, z, 7) }, &store);
        }
        op_check(|t| { let x = t.param("x")?; let z = t.narrow(&x, 1, 1, 2)?; weighted_sum(t, z, 8) }, &store);
        for seq_axis in 0..2 {
            for masked in [false, true] {
                op_check(
                    |t| {
                        let (x, y, w) = (t.param("x")?, t.param("y")?, t.param("w")?);
                        let k = t.dense(&y, &w, None)?;
                        let z = t.attention(&x, &k, &y, 2, seq_axis, masked)?;
                        weighted_sum(t, z, 9)
                    },
                    &store,
                );
            }
        }
        op_check(|t| { let x = t.param("x")?; t.bits_loss(&x, &[0, 1, 2, 3, 0, 1]) }, &store);
    }

    #[test]
    fn masked_attention_blocks_gradient_to_later_positions() {
        let mut rng = Rng::new(6);
        let store = store_with(&[("x", Tensor::randn(&[1, 4, 2], 1.0, &mut rng))]);
        let mut tape = Tape::new(&store);
        let x = tape.param("x").unwrap();
        let y = tape.attention(&x, &x, &x, 1, 1, true).unwrap();
        let first = tape.narrow(&y, 1, 0, 1).unwrap();
        let s = tape.sum(&first).unwrap();
        let g = tape.backward(s).unwrap();
        let gx = g.get("x").unwrap();
        for pos in 1..4 {
            for c in 0..2 {
                assert_eq!(gx.get(&[0, pos, c]), 0.0);
            }
        }
        assert!(gx.get(&[0, 0, 0]) != 0.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = store_with(&[("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap())]);
        adam_step(&mut store, &AdamConfig::default(), 1);
        assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = store_with(&[("w", Tensor::scalar(0.0))]);
        store.accumulate(&{
            let mut g = Gradients::default();
            g.accumulate("w", &Tensor::scalar(0.37)).unwrap();
            g
        })
        .unwrap();
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        adam_step(&mut store, &cfg, 1);
        assert!((store.value("w").unwrap().item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut store = store_with(&[("w", Tensor::scalar(0.0))]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        for t in 1..=100 {
            store.zero_grads();
            let w = store.value("w").unwrap().item();
            let mut g = Gradients::default();
            g.accumulate("w", &Tensor::scalar(2.0 * (w - 2.0))).unwrap();
            store.accumulate(&g).unwrap();
            adam_step(&mut store, &cfg, t);
        }
        assert!((store.value("w").unwrap().item() - 2.0).abs() < 0.1);
    }

    #[test]
    fn eager_and_tape_agree_bitwise() {
        let mut rng = Rng::new(8);
        let store = store_with(&[
            ("x", Tensor::randn(&[2, 3, 4], 1.0, &mut rng)),
            ("w", Tensor::randn(&[4, 4], 0.5, &mut rng)),
        ]);
        fn build<E: Exec>(e: &mut E) -> Result<E::Var> {
            let x = e.param("x")?;
            let w = e.param("w")?;
            let h = e.dense(&x, &w, None)?;
            let a = e.attention(&h, &h, &x, 2, 0, true)?;
            e.gelu(&a)
        }
        let mut eager = Eager::new(&store);
        let a = build(&mut eager).unwrap();
        let mut tape = Tape::new(&store);
        let b = build(&mut tape).unwrap();
        assert!(a.bit_eq(tape.value(&b)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }
}
