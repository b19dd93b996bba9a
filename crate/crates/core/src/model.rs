//! The Axial Transformer.
//!
//! For target channel `c` of an `H × W × C` symbol tensor `x`:
//!
//! ```text
//! ctx = Encoder(x[:, :, <c])                     (only when C > 1)
//! h   = Embed(x[:, :, c])
//! u   = h + P + ctx
//! u   = MaskedTransformerBlock_1(TransformerBlock_2(u))   × upper_layers / 2
//! h   = ShiftDown(u) + ShiftRight(h) + P + ctx
//! h   = MaskedTransformerBlock_2(h)                        × row_layers
//! logits = Dense_V(LayerNorm(h))
//! ```
//!
//! `P` is the broadcast sum of per-row and per-column embeddings. Logits at
//! `(i, j)` depend on `x[i, <j, c]`, `x[<i, :, c]` and all of `x[:, :, <c]`.

use crate::attention::AxisSpec;
use crate::autodiff::{Eager, Exec, ParameterStore};
use crate::config::ModelConfig;
use crate::data::DataTensor;
use crate::error::{Error, Result};
use crate::layers::{init_transformer_block, transformer_block, Init};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Deliberate architecture faults, used to show that the audits catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The upper context is used without its one-row ShiftDown.
    MissingShiftDown,
}

/// The `C + 1` input planes of the channel encoder for target channel `c`:
/// one slot per channel, holding the symbols of channels `< c` and the
/// reserved padding symbol elsewhere, plus a constant plane holding `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    slots: Vec<Vec<u32>>,
    index: usize,
    padding: u32,
}

impl EncoderInput {
    pub fn new(x: &DataTensor, c: usize, vocab: usize) -> Result<Self> {
        let channels = x.channels();
        if c >= channels {
            return Err(Error::Usage(format!("target channel {c} outside 0..{channels}")));
        }
        let padding = vocab as u32;
        let n = x.height() * x.width();
        let slots = (0..channels)
            .map(|k| if k < c { x.channel(k) } else { vec![padding; n] })
            .collect();
        Ok(Self { slots, index: c, padding })
    }

    /// Slot planes plus the channel-index plane.
    pub fn num_planes(&self) -> usize {
        self.slots.len() + 1
    }

    pub fn slot(&self, k: usize) -> &[u32] {
        &self.slots[k]
    }

    pub fn is_padding(&self, k: usize) -> bool {
        self.slots[k].iter().all(|&s| s == self.padding)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn padding_symbol(&self) -> u32 {
        self.padding
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    fault: Option<Fault>,
}

fn block_name(stack: &str, l: usize) -> String {
    format!("{stack}.block{l}")
}

impl Model {
    pub fn new(config: ModelConfig, init: Init, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Self::init_params(&config, init, rng)?;
        Ok(Self { config, params, fault: None })
    }

    fn init_params(cfg: &ModelConfig, init: Init, rng: &mut Rng) -> Result<ParameterStore> {
        let (d, std) = (cfg.dim, init.std());
        let mut s = ParameterStore::new();
        s.insert("embed", Tensor::randn(&[cfg.vocab, d], std, rng))?;
        s.insert("pos.row", Tensor::randn(&[cfg.height, d], std, rng))?;
        s.insert("pos.col", Tensor::randn(&[cfg.width, d], std, rng))?;
        if cfg.has_encoder() {
            for k in 0..cfg.channels {
                s.insert(&format!("enc.slot{k}"), Tensor::randn(&[cfg.vocab + 1, d], std, rng))?;
            }
            s.insert("enc.index", Tensor::randn(&[cfg.channels, d], std, rng))?;
            s.insert("enc.pos.row", Tensor::randn(&[cfg.height, d], std, rng))?;
            s.insert("enc.pos.col", Tensor::randn(&[cfg.width, d], std, rng))?;
            for l in 0..cfg.enc_layers {
                init_transformer_block(&mut s, &block_name("enc", l), d, cfg.ff_dim(), cfg.heads, init, rng)?;
            }
        }
        if !cfg.row_only {
            for l in 0..cfg.upper_layers {
                init_transformer_block(&mut s, &block_name("outer", l), d, cfg.ff_dim(), cfg.heads, init, rng)?;
            }
        }
        for l in 0..cfg.row_layers {
            init_transformer_block(&mut s, &block_name("inner", l), d, cfg.ff_dim(), cfg.heads, init, rng)?;
        }
        s.insert("head.ln.gamma", Tensor::full(&[d], 1.0))?;
        s.insert("head.ln.beta", Tensor::zeros(&[d]))?;
        s.insert("head.w", Tensor::randn(&[d, cfg.vocab], std, rng))?;
        s.insert("head.b", Tensor::zeros(&[cfg.vocab]))?;
        Ok(s)
    }

    /// Wraps existing parameters after checking that names and shapes match
    /// what `config` requires.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::init_params(&config, Init::default(), &mut Rng::new(0))?;
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                expected.len()
            )));
        }
        for (name, p) in expected.iter() {
            let got = params.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::shape("parameter", got.shape(), p.value.shape()));
            }
        }
        Ok(Self { config, params, fault: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault
    }

    pub fn check_input(&self, x: &DataTensor, c: usize) -> Result<()> {
        let cfg = &self.config;
        if x.shape() != [cfg.height, cfg.width, cfg.channels] {
            return Err(Error::shape("model input", &x.shape(), &[cfg.height, cfg.width, cfg.channels]));
        }
        if c >= cfg.channels {
            return Err(Error::Usage(format!("target channel {c} outside 0..{}", cfg.channels)));
        }
        x.check_vocab(cfg.vocab)
    }

    /// `H × W × D` embedding of an `H × W` symbol plane (or any sub-grid of
    /// `rows × cols` symbols).
    pub fn embed_plane<E: Exec>(&self, e: &mut E, symbols: &[u32], rows: usize, cols: usize) -> Result<E::Var> {
        let table = e.param("embed")?;
        e.embed(&table, symbols, &[rows, cols])
    }

    /// Additively factorized position embeddings `P[i, j] = row[i] + col[j]`.
    pub fn positions<E: Exec>(&self, e: &mut E, prefix: &str) -> Result<E::Var> {
        let row = e.param(&format!("{prefix}.row"))?;
        let col = e.param(&format!("{prefix}.col"))?;
        e.position_grid(&row, &col)
    }

    /// Context tensor from the previous channels; unmasked row and column
    /// blocks over the summed plane embeddings.
    pub fn channel_encoder<E: Exec>(&self, e: &mut E, input: &EncoderInput) -> Result<E::Var> {
        let cfg = &self.config;
        if !cfg.has_encoder() {
            return Err(Error::Config("single-channel models have no encoder".into()));
        }
        let (h, w) = (cfg.height, cfg.width);
        let mut acc: Option<E::Var> = None;
        for k in 0..cfg.channels {
            let table = e.param(&format!("enc.slot{k}"))?;
            let plane = e.embed(&table, input.slot(k), &[h, w])?;
            acc = Some(match acc {
                Some(a) => e.add(&a, &plane)?,
                None => plane,
            });
        }
        let index_table = e.param("enc.index")?;
        let index_plane = e.embed(&index_table, &vec![input.index() as u32; h * w], &[h, w])?;
        let acc = e.add(&acc.expect("channels >= 1"), &index_plane)?;
        let pos = self.positions(e, "enc.pos")?;
        let mut z = e.add(&acc, &pos)?;
        for l in 0..cfg.enc_layers {
            let spec = if l % 2 == 0 { AxisSpec::row(false) } else { AxisSpec::column(false) };
            z = transformer_block(e, &z, &block_name("enc", l), spec, cfg.heads)?;
        }
        Ok(z)
    }

    /// Upper context, already shifted down one row: row `i` of the result
    /// depends only on rows `< i` of `emb` (and on `ctx`).
    pub fn outer_decoder<E: Exec>(
        &self,
        e: &mut E,
        emb: &E::Var,
        pos: &E::Var,
        ctx: Option<&E::Var>,
    ) -> Result<E::Var> {
        let mut u = e.add(emb, pos)?;
        if let Some(ctx) = ctx {
            u = e.add(&u, ctx)?;
        }
        for l in 0..self.config.upper_layers {
            let spec = if l % 2 == 0 { AxisSpec::row(false) } else { AxisSpec::column(true) };
            u = transformer_block(e, &u, &block_name("outer", l), spec, self.config.heads)?;
        }
        match self.fault {
            Some(Fault::MissingShiftDown) => Ok(u),
            None => e.shift(&u, 0),
        }
    }

    /// Masked row stack over `ShiftDown(u) + ShiftRight(emb) + P + ctx`.
    /// Works on any `R × N` sub-grid whose rows and columns start at column 0,
    /// which is what the semi-parallel sampler evaluates.
    pub fn inner_decoder<E: Exec>(
        &self,
        e: &mut E,
        emb: &E::Var,
        upper: Option<&E::Var>,
        pos: &E::Var,
        ctx: Option<&E::Var>,
    ) -> Result<E::Var> {
        let shifted = e.shift(emb, 1)?;
        let mut h = match upper {
            Some(u) => e.add(u, &shifted)?,
            None => shifted,
        };
        h = e.add(&h, pos)?;
        if let Some(ctx) = ctx {
            h = e.add(&h, ctx)?;
        }
        for l in 0..self.config.row_layers {
            h = transformer_block(e, &h, &block_name("inner", l), AxisSpec::row(true), self.config.heads)?;
        }
        Ok(h)
    }

    pub fn logits_head<E: Exec>(&self, e: &mut E, h: &E::Var) -> Result<E::Var> {
        let g = e.param("head.ln.gamma")?;
        let b = e.param("head.ln.beta")?;
        let w = e.param("head.w")?;
        let bias = e.param("head.b")?;
        let n = e.layer_norm(h, &g, &b)?;
        e.dense(&n, &w, Some(&bias))
    }

    /// `H × W × V` logits for channel `c`.
    pub fn logits_with<E: Exec>(&self, e: &mut E, x: &DataTensor, c: usize) -> Result<E::Var> {
        self.check_input(x, c)?;
        let cfg = &self.config;
        let ctx = if cfg.has_encoder() {
            Some(self.channel_encoder(e, &EncoderInput::new(x, c, cfg.vocab)?)?)
        } else {
            None
        };
        let emb = self.embed_plane(e, &x.channel(c), cfg.height, cfg.width)?;
        let pos = self.positions(e, "pos")?;
        let upper = if cfg.row_only {
            None
        } else {
            Some(self.outer_decoder(e, &emb, &pos, ctx.as_ref())?)
        };
        let h = self.inner_decoder(e, &emb, upper.as_ref(), &pos, ctx.as_ref())?;
        self.logits_head(e, &h)
    }

    pub fn forward_logits(&self, x: &DataTensor, c: usize) -> Result<Tensor> {
        self.logits_with(&mut Eager::new(&self.params), x, c)
    }

    /// Mean bits per symbol of channel `c` given the previous channels.
    pub fn slice_loss_with<E: Exec>(&self, e: &mut E, x: &DataTensor, c: usize) -> Result<E::Var> {
        let logits = self.logits_with(e, x, c)?;
        e.bits_loss(&logits, &x.channel(c))
    }

    pub fn slice_bits_per_dim(&self, x: &DataTensor, c: usize) -> Result<f64> {
        let mut e = Eager::new(&self.params);
        let loss = self.slice_loss_with(&mut e, x, c)?;
        Ok(loss.item())
    }

    /// Total `-log2 p(x)` over every symbol, summed channel by channel.
    pub fn nll_bits(&self, x: &DataTensor) -> Result<f64> {
        let hw = (self.config.height * self.config.width) as f64;
        let mut total = 0.0;
        for c in 0..self.config.channels {
            total += self.slice_bits_per_dim(x, c)? * hw;
        }
        Ok(total)
    }

    /// Joint negative log2-likelihood divided by `H · W · C`.
    pub fn nll_bits_per_dim(&self, x: &DataTensor) -> Result<f64> {
        Ok(self.nll_bits(x)? / self.config.dims() as f64)
    }
}
