//! Dense row-major real tensors and the numeric kernels built on them.
//!
//! Tensors are immutable values: every operation returns a new tensor and the
//! backing buffer is reference counted, so clones are cheap. Axis
//! permutations are materialized copies.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Additive constant applied to masked attention scores before softmax.
pub const MASK_VALUE: f64 = -1e9;

/// Element type tag used by the AXT1 container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real64,
    Real32,
    Int32,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::Real64 => 0,
            DType::Real32 => 1,
            DType::Int32 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::Real64),
            1 => Some(DType::Real32),
            2 => Some(DType::Int32),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Real64 => "real64",
            DType::Real32 => "real32",
            DType::Int32 => "int32",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real64" => Some(DType::Real64),
            "real32" => Some(DType::Real32),
            "int32" => Some(DType::Int32),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.normal() * std).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Takes the buffer, copying only if it is shared.
    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut off = 0;
        for (i, (&ix, &e)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < e, "index {ix} out of bounds for axis {i} of extent {e}");
            off = off * e + ix;
        }
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Bit-level equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::shape(op, &self.shape, &[axis]));
        }
        Ok(())
    }

    /// `(outer, extent, inner)` split of the shape around `axis`.
    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    /// Swaps two axes, materializing the permuted layout.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        self.check_axis(a, "transpose")?;
        self.check_axis(b, "transpose")?;
        if a == b {
            return Ok(self.clone());
        }
        let rank = self.rank();
        let mut out_shape = self.shape.clone();
        out_shape.swap(a, b);
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let mut perm_strides = in_strides.clone();
        perm_strides.swap(a, b);
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis, "narrow")?;
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape("narrow", &self.shape, &[axis, start, len]));
        }
        let (outer, extent, inner) = self.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, out))
    }

    /// Moves slice `i` to `i + offset` along `axis`; vacated slices become zero.
    /// Negative offsets move slices toward index 0.
    pub fn shift(&self, axis: usize, offset: isize) -> Result<Tensor> {
        self.check_axis(axis, "shift")?;
        let (outer, extent, inner) = self.split_at_axis(axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..extent {
                let src = i as isize - offset;
                if src < 0 || src >= extent as isize {
                    continue;
                }
                let dst_base = (o * extent + i) * inner;
                let src_base = (o * extent + src as usize) * inner;
                out[dst_base..dst_base + inner]
                    .copy_from_slice(&self.data[src_base..src_base + inner]);
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Batched matrix product over the last two axes with broadcasting of the
    /// leading batch extents.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ar, br) = (self.rank(), other.rank());
        if ar < 2 || br < 2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[ar - 2], self.shape[ar - 1]);
        let (k2, p) = (other.shape[br - 2], other.shape[br - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let a_batch = &self.shape[..ar - 2];
        let b_batch = &other.shape[..br - 2];
        let out_batch = broadcast_shapes(a_batch, b_batch)
            .ok_or_else(|| Error::shape("matmul", &self.shape, &other.shape))?;
        let nb = numel(&out_batch);
        let mut out = vec![0.0; nb * m * p];
        let a_map = batch_offsets(a_batch, &out_batch);
        let b_map = batch_offsets(b_batch, &out_batch);
        for bi in 0..nb {
            let a = &self.data[a_map[bi] * m * k..(a_map[bi] + 1) * m * k];
            let b = &other.data[b_map[bi] * k * p..(b_map[bi] + 1) * k * p];
            matmul_into(a, b, m, k, p, &mut out[bi * m * p..(bi + 1) * m * p]);
        }
        let mut shape = out_batch;
        shape.push(m);
        shape.push(p);
        Ok(Self::from_parts(shape, out))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, extent, inner) = self.split_at_axis(axis);
        let mut out = vec![0.0; self.numel()];
        let mut buf = vec![0.0; extent];
        for o in 0..outer {
            for j in 0..inner {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = self.data[(o * extent + i) * inner + j];
                }
                softmax_in_place(&mut buf);
                for (i, &b) in buf.iter().enumerate() {
                    out[(o * extent + i) * inner + j] = b;
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax produced a non-finite value".into()));
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * x + beta`.
    pub fn normalize_lastaxis(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape.last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("normalize_lastaxis", &self.shape, gamma.shape()));
        }
        let mut out = vec![0.0; self.numel()];
        for (x, y) in self.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            layer_norm_row(x, gamma.data(), beta.data(), eps, y);
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index into `out`, the flat index into the (broadcast) `src`.
fn batch_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let pad = out.len() - src.len();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..n {
        let mut off = 0;
        for (d, &e) in src.iter().enumerate() {
            let i = if e == 1 { 0 } else { idx[d + pad] };
            off = off * e + i;
        }
        offsets.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

/// `out[m×p] = a[m×k] · b[k×p]`; each output element accumulates over `k` in
/// ascending order regardless of `m`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for (((o, &xv), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (xv - mean) * rstd * g + b;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GeLU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Draws a symbol from `softmax(logits / temperature)` with a single uniform
/// draw (inverse CDF). Temperature 0 selects the argmax, lowest index on ties,
/// and consumes no randomness.
pub fn categorical_sample(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<usize> {
    check_categorical(logits, temperature)?;
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    categorical_from_uniform(logits, temperature, rng.uniform())
}

fn check_categorical(logits: &[f64], temperature: f64) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Usage("empty logits".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("logits contain NaN".into()));
    }
    if logits.iter().all(|&v| v == f64::NEG_INFINITY) {
        return Err(Error::Numeric("all logits are -inf".into()));
    }
    if temperature.is_nan() || temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::Usage(format!("invalid temperature {temperature}")));
    }
    Ok(())
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF lookup of `u ∈ [0, 1)` in `softmax(logits / temperature)`.
/// At temperature 0 `u` is ignored and the argmax is returned.
pub fn categorical_from_uniform(logits: &[f64], temperature: f64, u: f64) -> Result<usize> {
    check_categorical(logits, temperature)?;
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let mut probs: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    softmax_in_place(&mut probs);
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(last_nonzero)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert!((c.get(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut rng = Rng::new(2);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = a.matmul(&w).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        let second = a.narrow(0, 1, 1).unwrap().reshape(&[3, 4]).unwrap();
        let expect = second.matmul(&w).unwrap();
        assert_eq!(c.narrow(0, 1, 1).unwrap().data(), expect.data());
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(t(&[2], &[0.0, 0.0]).softmax(0).unwrap().data(), &[0.5, 0.5]);
        let s = t(&[2], &[1f64.ln(), 3f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
        let m = t(&[2], &[0.3, MASK_VALUE]).softmax(0).unwrap();
        assert!((m.data()[0] - 1.0).abs() < 1e-12 && m.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_nan_is_error() {
        assert!(matches!(t(&[2], &[f64::NAN, 0.0]).softmax(0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(x.softmax(0).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn shift_examples() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.shift(1, 1).unwrap().data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        let y = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.shift(0, 1).unwrap().data(), &[0.0, 0.0, 1.0, 2.0]);
        let back = x.shift(1, 1).unwrap().shift(1, -1).unwrap();
        assert_eq!(back.narrow(1, 0, 2).unwrap(), x.narrow(1, 0, 2).unwrap());
    }

    #[test]
    fn shift_is_nilpotent() {
        let mut rng = Rng::new(5);
        let mut x = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        for _ in 0..4 {
            x = x.shift(1, 1).unwrap();
        }
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let c = t(&[2], &[3.0, 3.0]).normalize_lastaxis(&g, &b, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let u = t(&[2], &[1.0, -1.0]).normalize_lastaxis(&g, &b, 1e-14).unwrap();
        assert!((u.data()[0] - 1.0).abs() < 1e-12 && (u.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_reference() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[3, 5], 2.0, &mut rng);
        let g = Tensor::randn(&[5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let y = x.normalize_lastaxis(&g, &b, 1e-5).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = (0..5).map(|c| x.get(&[r, c])).collect();
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            for c in 0..5 {
                let expect = (row[c] - mean) / (var + 1e-5).sqrt() * g.data()[c] + b.data()[c];
                assert!((y.get(&[r, c]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let y = x.transpose(0, 2).unwrap();
        assert_eq!(y.shape(), &[4, 3, 2]);
        assert_eq!(y.get(&[3, 1, 0]), x.get(&[0, 1, 3]));
        assert_eq!(y.transpose(0, 2).unwrap(), x);
        assert_eq!(x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap(), x);
    }

    #[test]
    fn categorical_examples() {
        let mut rng = Rng::new(0);
        assert_eq!(categorical_sample(&[1.0, 3.0, 2.0], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(categorical_sample(&[2.0, 2.0], 0.0, &mut rng).unwrap(), 0);
        for _ in 0..1000 {
            assert_eq!(categorical_sample(&[10.0, -10.0], 1.0, &mut rng).unwrap(), 0);
        }
        let inf = f64::NEG_INFINITY;
        assert!(matches!(
            categorical_sample(&[inf, inf], 1.0, &mut rng),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn categorical_frequencies_within_three_sigma() {
        let mut rng = Rng::new(42);
        let n = 100_000;
        let logits = [1f64.ln(), 3f64.ln()];
        let ones = (0..n)
            .filter(|_| categorical_sample(&logits, 1.0, &mut rng).unwrap() == 1)
            .count();
        let p = 0.75;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((ones as f64 / n as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
