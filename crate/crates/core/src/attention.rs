//! Multi-head self-attention along one axis of an `H × W × D` activation
//! tensor.
//!
//! The kernels address sequences through strides, so row attention and
//! column attention run on the untransposed tensor. [`attention_axis_by_transpose`]
//! is the explicit transpose / attend / untranspose composition and produces
//! bit-identical output.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax_in_place, Tensor, MASK_VALUE};

/// Spatial axis of an image tensor. Attention along `Height` mixes values
/// within a column ("column attention"), along `Width` within a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    /// Position of the axis in an `H × W × D` tensor.
    pub fn tensor_axis(self) -> usize {
        match self {
            Axis::Height => 0,
            Axis::Width => 1,
        }
    }

    /// Axis from its 1-based index (`1` = height, `2` = width).
    pub fn from_index(k: usize) -> Result<Axis> {
        match k {
            1 => Ok(Axis::Height),
            2 => Ok(Axis::Width),
            _ => Err(Error::Config(format!("invalid attention axis {k}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisSpec {
    pub axis: Axis,
    pub masked: bool,
}

impl AxisSpec {
    pub fn row(masked: bool) -> Self {
        Self { axis: Axis::Width, masked }
    }

    pub fn column(masked: bool) -> Self {
        Self { axis: Axis::Height, masked }
    }
}

/// Projection weights of one multi-head attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        let d = wq.shape()[0];
        for w in [&wq, &wk, &wv, &wo] {
            if w.shape() != [d, d] {
                return Err(Error::shape("attention params", w.shape(), &[d, d]));
            }
        }
        check_heads(d, heads)?;
        Ok(Self { wq, wk, wv, wo, heads })
    }

    pub fn random(dim: usize, heads: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut w = || Tensor::randn(&[dim, dim], std, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        Self::new(wq, wk, wv, wo, heads)
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// How sequences are laid out inside a rank-3 `[A, B, D]` tensor, in units of
/// `D`-vectors.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n_seq: usize,
    len: usize,
    seq_stride: usize,
    pos_stride: usize,
}

impl Layout {
    fn new(shape: &[usize], seq_axis: usize) -> Layout {
        let (a, b) = (shape[0], shape[1]);
        if seq_axis == 1 {
            Layout { n_seq: a, len: b, seq_stride: b, pos_stride: 1 }
        } else {
            Layout { n_seq: b, len: a, seq_stride: 1, pos_stride: b }
        }
    }

    fn row(&self, s: usize, i: usize) -> usize {
        s * self.seq_stride + i * self.pos_stride
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, seq_axis: usize) -> Result<()> {
    if q.rank() != 3 || seq_axis > 1 {
        return Err(Error::shape("attention", q.shape(), &[seq_axis]));
    }
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    check_heads(q.shape()[2], heads)
}

/// Fills `probs[..len]` with the attention weights of query `i` against every
/// key of the sequence.
#[allow(clippy::too_many_arguments)]
fn attention_weights(
    q: &[f64],
    k: &[f64],
    lay: &Layout,
    s: usize,
    i: usize,
    off: usize,
    hd: usize,
    d: usize,
    scale: f64,
    masked: bool,
    probs: &mut [f64],
) {
    let qrow = lay.row(s, i) * d + off;
    let qi = &q[qrow..qrow + hd];
    for (j, p) in probs.iter_mut().enumerate() {
        let krow = lay.row(s, j) * d + off;
        let kj = &k[krow..krow + hd];
        let mut dot = 0.0;
        for (a, b) in qi.iter().zip(kj) {
            dot += a * b;
        }
        let mut score = dot * scale;
        if masked && j > i {
            score += MASK_VALUE;
        }
        *p = score;
    }
    softmax_in_place(probs);
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`
/// (`[A, B, D]`), along axis `seq_axis` (0 or 1), heads concatenated.
pub fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    seq_axis: usize,
    masked: bool,
) -> Result<Tensor> {
    check_qkv(q, k, v, heads, seq_axis)?;
    let d = q.shape()[2];
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let lay = Layout::new(q.shape(), seq_axis);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; q.numel()];
    let mut probs = vec![0.0; lay.len];
    for s in 0..lay.n_seq {
        for h in 0..heads {
            let off = h * hd;
            for i in 0..lay.len {
                attention_weights(qd, kd, &lay, s, i, off, hd, d, scale, masked, &mut probs);
                let orow = lay.row(s, i) * d + off;
                let o = &mut out[orow..orow + hd];
                for (j, &p) in probs.iter().enumerate() {
                    let vrow = lay.row(s, j) * d + off;
                    for (ov, &vv) in o.iter_mut().zip(&vd[vrow..vrow + hd]) {
                        *ov += p * vv;
                    }
                }
            }
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("attention produced a non-finite value".into()));
    }
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

/// Gradients of [`attention_core`] with respect to `q`, `k` and `v`. The mask
/// constant is treated as a non-differentiable input.
pub fn attention_core_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dout: &Tensor,
    heads: usize,
    seq_axis: usize,
    masked: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_qkv(q, k, v, heads, seq_axis)?;
    let d = q.shape()[2];
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let lay = Layout::new(q.shape(), seq_axis);
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; q.numel()];
    let mut dv = vec![0.0; q.numel()];
    let mut probs = vec![0.0; lay.len];
    let mut dp = vec![0.0; lay.len];
    for s in 0..lay.n_seq {
        for h in 0..heads {
            let off = h * hd;
            for i in 0..lay.len {
                attention_weights(qd, kd, &lay, s, i, off, hd, d, scale, masked, &mut probs);
                let irow = lay.row(s, i) * d + off;
                let go = &gd[irow..irow + hd];
                let mut weighted = 0.0;
                for j in 0..lay.len {
                    let jrow = lay.row(s, j) * d + off;
                    let mut dot = 0.0;
                    for (a, b) in go.iter().zip(&vd[jrow..jrow + hd]) {
                        dot += a * b;
                    }
                    dp[j] = dot;
                    weighted += probs[j] * dot;
                    for (dvv, &g) in dv[jrow..jrow + hd].iter_mut().zip(go) {
                        *dvv += probs[j] * g;
                    }
                }
                for j in 0..lay.len {
                    let ds = probs[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let jrow = lay.row(s, j) * d + off;
                    for t in 0..hd {
                        dq[irow + t] += ds * kd[jrow + t];
                        dk[jrow + t] += ds * qd[irow + t];
                    }
                }
            }
        }
    }
    let shape = q.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), dq),
        Tensor::from_parts(shape.clone(), dk),
        Tensor::from_parts(shape, dv),
    ))
}

fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    x.matmul(w)
}

/// Multi-head self-attention over the middle axis of `x: [B, N, D]`; `B`
/// independent sequences of length `N`.
pub fn attention_1d(x: &Tensor, params: &AttentionParams, masked: bool) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[2] != params.dim() {
        return Err(Error::shape("attention_1d", x.shape(), params.wq.shape()));
    }
    let q = project(x, &params.wq)?;
    let k = project(x, &params.wk)?;
    let v = project(x, &params.wv)?;
    let heads = attention_core(&q, &k, &v, params.heads, 1, masked)?;
    project(&heads, &params.wo)
}

/// Axial attention on `x: [H, W, D]` along `spec.axis`, evaluated in place
/// through strides.
pub fn attention_axis(x: &Tensor, spec: AxisSpec, params: &AttentionParams) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[2] != params.dim() {
        return Err(Error::shape("attention_axis", x.shape(), params.wq.shape()));
    }
    let q = project(x, &params.wq)?;
    let k = project(x, &params.wk)?;
    let v = project(x, &params.wv)?;
    let heads = attention_core(&q, &k, &v, params.heads, spec.axis.tensor_axis(), spec.masked)?;
    project(&heads, &params.wo)
}

/// Axial attention by moving the non-attended axis to the batch position,
/// calling [`attention_1d`], and undoing the transpose.
pub fn attention_axis_by_transpose(
    x: &Tensor,
    spec: AxisSpec,
    params: &AttentionParams,
) -> Result<Tensor> {
    match spec.axis {
        Axis::Width => attention_1d(x, params, spec.masked),
        Axis::Height => {
            let t = x.transpose(0, 1)?;
            attention_1d(&t, params, spec.masked)?.transpose(0, 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    Axial,
}

/// Number of query-key pairs scored by one attention layer on a
/// `d`-dimensional tensor with extent `side` on every axis.
pub fn pair_count(side: u64, d: u32, mode: AttentionMode) -> u128 {
    let s = side as u128;
    match mode {
        AttentionMode::Full => s.pow(2 * d),
        AttentionMode::Axial => s.pow(d + 1),
    }
}
