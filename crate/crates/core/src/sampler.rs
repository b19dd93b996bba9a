//! Ancestral sampling.
//!
//! Both samplers visit symbols channel by channel, rows top to bottom, columns
//! left to right, and consume exactly one uniform draw per symbol in that
//! order, so for a given seed they pick the same symbols whenever they compute
//! the same logits. Unsampled positions hold symbol 0; the model's causal
//! structure guarantees they never influence the logits being read.

use crate::autodiff::Eager;
use crate::config::ModelConfig;
use crate::data::DataTensor;
use crate::error::{Error, Result};
use crate::model::{EncoderInput, Model};
use crate::rng::Rng;
use crate::tensor::{categorical_from_uniform, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Full network re-evaluation per symbol.
    Naive,
    /// Outer decoder once per row, inner decoder over the row prefix per symbol.
    SemiParallel,
}

impl SamplerMode {
    pub fn parse(s: &str) -> Option<SamplerMode> {
        match s {
            "naive" => Some(SamplerMode::Naive),
            "semi" | "semi-parallel" | "semi_parallel" => Some(SamplerMode::SemiParallel),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Naive => "naive",
            SamplerMode::SemiParallel => "semi",
        }
    }
}

/// Counts of network evaluations during one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub uniforms: u64,
    pub full_evals: u64,
    pub encoder_evals: u64,
    pub outer_evals: u64,
    pub inner_evals: u64,
}

/// A sample with the logits each symbol was drawn from, in draw order.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub sample: DataTensor,
    pub logits: Vec<Vec<f64>>,
    pub stats: SampleStats,
}

fn empty(model: &Model) -> DataTensor {
    let c = model.config();
    DataTensor::zeros(c.height, c.width, c.channels)
}

fn draw(logits: &[f64], temperature: f64, rng: &mut Rng, stats: &mut SampleStats) -> Result<u32> {
    stats.uniforms += 1;
    let u = rng.uniform();
    Ok(categorical_from_uniform(logits, temperature, u)? as u32)
}

fn logits_at(t: &Tensor, i: usize, j: usize) -> Vec<f64> {
    let (w, v) = (t.shape()[1], t.shape()[2]);
    let start = (i * w + j) * v;
    t.data()[start..start + v].to_vec()
}

pub fn sample_naive_traced(model: &Model, rng: &mut Rng, temperature: f64) -> Result<SampleTrace> {
    let cfg = *model.config();
    let mut x = empty(model);
    let mut logits = Vec::with_capacity(cfg.dims());
    let mut stats = SampleStats::default();
    for c in 0..cfg.channels {
        for i in 0..cfg.height {
            for j in 0..cfg.width {
                let full = model.forward_logits(&x, c)?;
                stats.full_evals += 1;
                let l = logits_at(&full, i, j);
                x.set(i, j, c, draw(&l, temperature, rng, &mut stats)?);
                logits.push(l);
            }
        }
    }
    Ok(SampleTrace { sample: x, logits, stats })
}

pub fn sample_semi_parallel_traced(model: &Model, rng: &mut Rng, temperature: f64) -> Result<SampleTrace> {
    let cfg = *model.config();
    let (h, w) = (cfg.height, cfg.width);
    let mut x = empty(model);
    let mut logits = Vec::with_capacity(cfg.dims());
    let mut stats = SampleStats::default();
    let mut e = Eager::new(model.params());
    let pos = model.positions(&mut e, "pos")?;
    for c in 0..cfg.channels {
        let ctx = if cfg.has_encoder() {
            stats.encoder_evals += 1;
            Some(model.channel_encoder(&mut e, &EncoderInput::new(&x, c, cfg.vocab)?)?)
        } else {
            None
        };
        for i in 0..h {
            let upper = if cfg.row_only {
                None
            } else {
                let emb = model.embed_plane(&mut e, &x.channel(c), h, w)?;
                stats.outer_evals += 1;
                Some(model.outer_decoder(&mut e, &emb, &pos, ctx.as_ref())?.narrow(0, i, 1)?)
            };
            let pos_row = pos.narrow(0, i, 1)?;
            let ctx_row = ctx.as_ref().map(|t| t.narrow(0, i, 1)).transpose()?;
            for j in 0..w {
                let n = j + 1;
                let prefix: Vec<u32> = (0..n).map(|jj| x.get(i, jj, c)).collect();
                let emb = model.embed_plane(&mut e, &prefix, 1, n)?;
                let upper_p = upper.as_ref().map(|t| t.narrow(1, 0, n)).transpose()?;
                let ctx_p = ctx_row.as_ref().map(|t| t.narrow(1, 0, n)).transpose()?;
                let hid = model.inner_decoder(&mut e, &emb, upper_p.as_ref(), &pos_row.narrow(1, 0, n)?, ctx_p.as_ref())?;
                stats.inner_evals += 1;
                let out = model.logits_head(&mut e, &hid.narrow(1, j, 1)?)?;
                let l = out.to_vec();
                x.set(i, j, c, draw(&l, temperature, rng, &mut stats)?);
                logits.push(l);
            }
        }
    }
    Ok(SampleTrace { sample: x, logits, stats })
}

pub fn sample_naive(model: &Model, rng: &mut Rng, temperature: f64) -> Result<DataTensor> {
    Ok(sample_naive_traced(model, rng, temperature)?.sample)
}

pub fn sample_semi_parallel(model: &Model, rng: &mut Rng, temperature: f64) -> Result<DataTensor> {
    Ok(sample_semi_parallel_traced(model, rng, temperature)?.sample)
}

pub fn sample_traced(model: &Model, mode: SamplerMode, rng: &mut Rng, temperature: f64) -> Result<SampleTrace> {
    match mode {
        SamplerMode::Naive => sample_naive_traced(model, rng, temperature),
        SamplerMode::SemiParallel => sample_semi_parallel_traced(model, rng, temperature),
    }
}

/// Episode `k` of a batch uses stream `k` of the seed.
pub fn episode_rng(seed: u64, k: u64) -> Rng {
    Rng::new(seed).split(k)
}

/// Analytic cost in position-layer attention rows, per channel, for a square
/// `S × S` image (`N = S²`): `N²·√N·L` naive, `N²·L` semi-parallel, with
/// `L = L_upper + L_row`.
pub fn sampling_cost(config: &ModelConfig, mode: SamplerMode) -> Result<u128> {
    if config.height != config.width {
        return Err(Error::Usage(format!(
            "sampling cost is defined for square images, got {}x{}",
            config.height, config.width
        )));
    }
    let s = config.height as u128;
    let n = s * s;
    let layers = (config.upper_layers + config.row_layers) as u128;
    Ok(match mode {
        SamplerMode::Naive => n * n * s * layers,
        SamplerMode::SemiParallel => n * n * layers,
    })
}
