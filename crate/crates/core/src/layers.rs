//! Residual blocks built from axial attention, layer normalization and dense
//! layers:
//!
//! ```text
//! FeedforwardBlock(x)   = x + Dense_D(GeLU(Dense_D'(LayerNorm(x))))
//! AttentionBlock_k(x)   = x + Dense_D(Attention_k(LayerNorm(x)))
//! TransformerBlock_k(x) = FeedforwardBlock(AttentionBlock_k(x))
//! ```
//!
//! Parameters live in a [`ParameterStore`] under a per-block name prefix.

use crate::attention::{check_heads, AttentionParams, AxisSpec};
use crate::autodiff::{Exec, ParameterStore};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Weights ~ N(0, std), biases 0, the last dense layer of every residual
    /// branch zero, so each block starts as the identity.
    ZeroBranch { std: f64 },
    /// Every weight ~ N(0, std), including branch outputs. Used by audits,
    /// which need every path to carry signal.
    Dense { std: f64 },
}

impl Init {
    pub fn std(self) -> f64 {
        match self {
            Init::ZeroBranch { std } | Init::Dense { std } => std,
        }
    }

    fn branch_output(self, shape: &[usize], rng: &mut Rng) -> Tensor {
        match self {
            Init::ZeroBranch { .. } => Tensor::zeros(shape),
            Init::Dense { std } => Tensor::randn(shape, std, rng),
        }
    }
}

impl Default for Init {
    fn default() -> Self {
        Init::ZeroBranch { std: 0.02 }
    }
}

/// Registers LayerNorm, attention and feedforward parameters of one
/// transformer block under `prefix`.
pub fn init_transformer_block(
    store: &mut ParameterStore,
    prefix: &str,
    dim: usize,
    ff_dim: usize,
    heads: usize,
    init: Init,
    rng: &mut Rng,
) -> Result<()> {
    check_heads(dim, heads)?;
    let std = init.std();
    store.insert(&format!("{prefix}.attn.ln.gamma"), Tensor::full(&[dim], 1.0))?;
    store.insert(&format!("{prefix}.attn.ln.beta"), Tensor::zeros(&[dim]))?;
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.attn.{w}"), Tensor::randn(&[dim, dim], std, rng))?;
    }
    store.insert(&format!("{prefix}.attn.out.w"), init.branch_output(&[dim, dim], rng))?;
    store.insert(&format!("{prefix}.attn.out.b"), Tensor::zeros(&[dim]))?;
    init_feedforward(store, prefix, dim, ff_dim, init, rng)
}

fn init_feedforward(
    store: &mut ParameterStore,
    prefix: &str,
    dim: usize,
    ff_dim: usize,
    init: Init,
    rng: &mut Rng,
) -> Result<()> {
    store.insert(&format!("{prefix}.ff.ln.gamma"), Tensor::full(&[dim], 1.0))?;
    store.insert(&format!("{prefix}.ff.ln.beta"), Tensor::zeros(&[dim]))?;
    store.insert(&format!("{prefix}.ff.in.w"), Tensor::randn(&[dim, ff_dim], init.std(), rng))?;
    store.insert(&format!("{prefix}.ff.in.b"), Tensor::zeros(&[ff_dim]))?;
    store.insert(&format!("{prefix}.ff.out.w"), init.branch_output(&[ff_dim, dim], rng))?;
    store.insert(&format!("{prefix}.ff.out.b"), Tensor::zeros(&[dim]))?;
    Ok(())
}

/// The attention projections stored under `prefix`.
pub fn attention_params(store: &ParameterStore, prefix: &str, heads: usize) -> Result<AttentionParams> {
    let get = |w: &str| store.value(&format!("{prefix}.attn.{w}")).cloned();
    AttentionParams::new(get("wq")?, get("wk")?, get("wv")?, get("wo")?, heads)
}

pub fn feedforward_block<E: Exec>(e: &mut E, x: &E::Var, prefix: &str) -> Result<E::Var> {
    let g = e.param(&format!("{prefix}.ff.ln.gamma"))?;
    let b = e.param(&format!("{prefix}.ff.ln.beta"))?;
    let w1 = e.param(&format!("{prefix}.ff.in.w"))?;
    let b1 = e.param(&format!("{prefix}.ff.in.b"))?;
    let w2 = e.param(&format!("{prefix}.ff.out.w"))?;
    let b2 = e.param(&format!("{prefix}.ff.out.b"))?;
    let n = e.layer_norm(x, &g, &b)?;
    let h = e.dense(&n, &w1, Some(&b1))?;
    let h = e.gelu(&h)?;
    let y = e.dense(&h, &w2, Some(&b2))?;
    e.add(x, &y)
}

/// Multi-head attention along `spec.axis` of an `H × W × D` value, with the
/// projections stored under `{prefix}.attn`.
pub fn axial_attention<E: Exec>(
    e: &mut E,
    x: &E::Var,
    prefix: &str,
    spec: AxisSpec,
    heads: usize,
) -> Result<E::Var> {
    let wq = e.param(&format!("{prefix}.attn.wq"))?;
    let wk = e.param(&format!("{prefix}.attn.wk"))?;
    let wv = e.param(&format!("{prefix}.attn.wv"))?;
    let wo = e.param(&format!("{prefix}.attn.wo"))?;
    let q = e.dense(x, &wq, None)?;
    let k = e.dense(x, &wk, None)?;
    let v = e.dense(x, &wv, None)?;
    let a = e.attention(&q, &k, &v, heads, spec.axis.tensor_axis(), spec.masked)?;
    e.dense(&a, &wo, None)
}

pub fn attention_block<E: Exec>(
    e: &mut E,
    x: &E::Var,
    prefix: &str,
    spec: AxisSpec,
    heads: usize,
) -> Result<E::Var> {
    let g = e.param(&format!("{prefix}.attn.ln.gamma"))?;
    let b = e.param(&format!("{prefix}.attn.ln.beta"))?;
    let w = e.param(&format!("{prefix}.attn.out.w"))?;
    let bias = e.param(&format!("{prefix}.attn.out.b"))?;
    let n = e.layer_norm(x, &g, &b)?;
    let a = axial_attention(e, &n, prefix, spec, heads)?;
    let y = e.dense(&a, &w, Some(&bias))?;
    e.add(x, &y)
}

pub fn transformer_block<E: Exec>(
    e: &mut E,
    x: &E::Var,
    prefix: &str,
    spec: AxisSpec,
    heads: usize,
) -> Result<E::Var> {
    let h = attention_block(e, x, prefix, spec, heads)?;
    feedforward_block(e, &h, prefix)
}
