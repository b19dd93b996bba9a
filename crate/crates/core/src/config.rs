//! Model and training hyperparameters, and their flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::tensor::DType;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub vocab: usize,
    pub dim: usize,
    /// Feedforward hidden width as a multiple of `dim`.
    pub ff_mult: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub upper_layers: usize,
    pub row_layers: usize,
    /// Drop the outer decoder: every row becomes an independent
    /// autoregressive model over its own pixels.
    pub row_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 1,
            vocab: 16,
            dim: 32,
            ff_mult: 2,
            heads: 4,
            enc_layers: 4,
            upper_layers: 4,
            row_layers: 2,
            row_only: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("ff_mult", self.ff_mult),
            ("heads", self.heads),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.upper_layers.is_multiple_of(2) {
            return Err(Error::Config("upper_layers must be even".into()));
        }
        if !self.enc_layers.is_multiple_of(2) {
            return Err(Error::Config("enc_layers must be even".into()));
        }
        if self.vocab > i32::MAX as usize {
            return Err(Error::Config("vocab too large".into()));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        self.dim * self.ff_mult
    }

    /// Symbols per image, `H · W · C`.
    pub fn dims(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Whether a channel encoder exists (only for multi-channel data).
    pub fn has_encoder(&self) -> bool {
        self.channels > 1
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub warmup: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub init: Init,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            warmup: 1000,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            eval_every: 100,
            checkpoint_every: 500,
            init: Init::default(),
            dtype: DType::Real32,
        }
    }
}

impl TrainConfig {
    /// Learning rate at 1-based step `t`: linear warmup to the peak, then flat.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup == 0 || t >= self.warmup {
            self.adam.lr
        } else {
            self.adam.lr * t as f64 / self.warmup as f64
        }
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value `{value}` for config key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Usage(format!("invalid value `{value}` for config key `{key}`"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut init_kind = "zero_branch".to_string();
        let mut init_std = cfg.train.init.std();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match key {
                "height" => m.height = parse_num(key, value)?,
                "width" => m.width = parse_num(key, value)?,
                "channels" => m.channels = parse_num(key, value)?,
                "vocab" => m.vocab = parse_num(key, value)?,
                "dim" => m.dim = parse_num(key, value)?,
                "ff_mult" => m.ff_mult = parse_num(key, value)?,
                "heads" => m.heads = parse_num(key, value)?,
                "enc_layers" => m.enc_layers = parse_num(key, value)?,
                "upper_layers" => m.upper_layers = parse_num(key, value)?,
                "row_layers" => m.row_layers = parse_num(key, value)?,
                "row_only" => m.row_only = parse_bool(key, value)?,
                "lr" => t.adam.lr = parse_num(key, value)?,
                "beta1" => t.adam.beta1 = parse_num(key, value)?,
                "beta2" => t.adam.beta2 = parse_num(key, value)?,
                "eps" => t.adam.eps = parse_num(key, value)?,
                "warmup" => t.warmup = parse_num(key, value)?,
                "batch_size" => t.batch_size = parse_num(key, value)?,
                "steps" => t.steps = parse_num(key, value)?,
                "seed" => t.seed = parse_num(key, value)?,
                "eval_every" => t.eval_every = parse_num(key, value)?,
                "checkpoint_every" => t.checkpoint_every = parse_num(key, value)?,
                "init" => init_kind = value.to_string(),
                "init_std" => init_std = parse_num(key, value)?,
                "dtype" => {
                    t.dtype = match DType::parse(value) {
                        Some(d @ (DType::Real32 | DType::Real64)) => d,
                        _ => {
                            return Err(Error::Usage(format!(
                                "invalid value `{value}` for config key `dtype`"
                            )))
                        }
                    }
                }
                _ => return Err(Error::Usage(format!("unknown config key `{key}`"))),
            }
        }
        cfg.train.init = match init_kind.as_str() {
            "zero_branch" => Init::ZeroBranch { std: init_std },
            "dense" => Init::Dense { std: init_std },
            other => return Err(Error::Usage(format!("invalid value `{other}` for config key `init`"))),
        };
        if cfg.train.batch_size == 0 {
            return Err(Error::Usage("batch_size must be positive".into()));
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let (init, std) = match t.init {
            Init::ZeroBranch { std } => ("zero_branch", std),
            Init::Dense { std } => ("dense", std),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("height", m.height.to_string());
        kv("width", m.width.to_string());
        kv("channels", m.channels.to_string());
        kv("vocab", m.vocab.to_string());
        kv("dim", m.dim.to_string());
        kv("ff_mult", m.ff_mult.to_string());
        kv("heads", m.heads.to_string());
        kv("enc_layers", m.enc_layers.to_string());
        kv("upper_layers", m.upper_layers.to_string());
        kv("row_layers", m.row_layers.to_string());
        kv("row_only", m.row_only.to_string());
        kv("lr", format!("{:?}", t.adam.lr));
        kv("beta1", format!("{:?}", t.adam.beta1));
        kv("beta2", format!("{:?}", t.adam.beta2));
        kv("eps", format!("{:?}", t.adam.eps));
        kv("warmup", t.warmup.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("steps", t.steps.to_string());
        kv("seed", t.seed.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("init", init.to_string());
        kv("init_std", format!("{std:?}"));
        kv("dtype", t.dtype.name().to_string());
        s
    }
}
