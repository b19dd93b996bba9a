//! Maximum-likelihood training on random channel slices, evaluation and the
//! resumable training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{adam_step, Gradients, Tape};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{DataTensor, Dataset};
use crate::error::{Error, Result};
use crate::format::Checkpoint;
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::DType;

pub const CHECKPOINT_FILE: &str = "checkpoint.axck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,train_bits,valid_bits,wall_ms";

/// Rounds every parameter to the nearest `f32` when training in `real32`.
pub fn apply_storage_dtype(model: &mut Model, dtype: DType) {
    if dtype == DType::Real32 {
        model.params_mut().map_values(|v| v as f32 as f64);
    }
}

/// Loss and gradients for one example on slice `c`.
fn example_gradients(model: &Model, x: &DataTensor, c: usize) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(model.params());
    let loss = model.slice_loss_with(&mut tape, x, c)?;
    let value = tape.replay(loss)?.item();
    Ok((value, tape.backward(loss)?))
}

/// One optimizer step at 1-based step index `t`. Each example gets its own
/// uniformly drawn channel slice; the loss is the batch mean of slice
/// bits/dim. Gradients are reduced in batch order regardless of how the
/// examples were scheduled.
pub fn train_step(model: &mut Model, cfg: &TrainConfig, t: u64, batch: &[DataTensor], rng: &mut Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let channels = model.config().channels;
    let slices: Vec<usize> = batch.iter().map(|_| rng.below(channels)).collect();
    let m: &Model = model;
    let results: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .zip(&slices)
        .map(|(x, &c)| example_gradients(m, x, c))
        .collect();
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for (k, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {l} at step {t}, batch example {k}, channel slice {}",
                slices[k]
            )));
        }
        loss += l;
        total.merge(&g)?;
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    let store = model.params_mut();
    store.zero_grads();
    store.accumulate(&total)?;
    let mut adam = cfg.adam;
    adam.lr = cfg.lr_at(t);
    adam_step(store, &adam, t);
    apply_storage_dtype(model, cfg.dtype);
    Ok(loss * scale)
}

/// Exact joint bits/dim, averaged over images. Uses no randomness.
pub fn evaluate(model: &Model, images: &[DataTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let per: Vec<Result<f64>> = images.par_iter().map(|x| model.nll_bits_per_dim(x)).collect();
    let mut sum = 0.0;
    for v in per {
        sum += v?;
    }
    Ok(sum / images.len() as f64)
}

/// Conditional bits/dim of each channel slice, averaged over images.
pub fn evaluate_slices(model: &Model, images: &[DataTensor]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let channels = model.config().channels;
    let mut out = vec![0.0; channels];
    for (c, slot) in out.iter_mut().enumerate() {
        let per: Vec<Result<f64>> = images.par_iter().map(|x| model.slice_bits_per_dim(x, c)).collect();
        for v in per {
            *slot += v?;
        }
        *slot /= images.len() as f64;
    }
    Ok(out)
}

/// Model, optimizer state and step counter of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    run: RunConfig,
    model: Model,
    step: u64,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        let mut rng = Rng::new(run.train.seed).split(u64::MAX);
        let mut model = Model::new(run.model, run.train.init, &mut rng)?;
        apply_storage_dtype(&mut model, run.train.dtype);
        Ok(Self { run, model, step: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = Model::from_parts(ck.config.model, ck.store)?;
        Ok(Self { run: ck.config, model, step: ck.step })
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.run, step: self.step, store: self.model.params().clone() }
    }

    /// Draws a batch with the per-step stream and takes one step. The stream
    /// depends only on the seed and the step index, so resuming from a
    /// checkpoint continues the exact same trajectory.
    pub fn step_on(&mut self, train: &[DataTensor]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Usage("empty train split".into()));
        }
        let t = self.step + 1;
        let mut rng = Rng::new(self.run.train.seed).split(t);
        let batch: Vec<DataTensor> = (0..self.run.train.batch_size)
            .map(|_| train[rng.below(train.len())].clone())
            .collect();
        let loss = train_step(&mut self.model, &self.run.train, t, &batch, &mut rng)?;
        self.step = t;
        Ok(loss)
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_bits: f64,
    pub valid_bits: f64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:.6},{:.6},{}", self.step, self.train_bits, self.valid_bits, self.wall_ms)
    }
}

/// Trains until the trainer has taken `steps` total steps. Appends to `out/metrics.csv` every `eval_every` steps and at the
/// end, and checkpoints every `checkpoint_every` steps and at the end.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &Dataset,
    out: &Path,
    steps: u64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let cfg = *trainer.model().config();
    if data.shape != [cfg.height, cfg.width, cfg.channels] {
        return Err(Error::shape("dataset", &data.shape, &[cfg.height, cfg.width, cfg.channels]));
    }
    if data.vocab > cfg.vocab {
        return Err(Error::Usage(format!("dataset vocab {} exceeds model vocab {}", data.vocab, cfg.vocab)));
    }
    fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    if metrics.metadata()?.len() == 0 {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }
    let ck_path = checkpoint_path(out);
    let tc = trainer.run_config().train;
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut window = (0.0, 0u64);
    if trainer.step() >= steps {
        trainer.checkpoint().save(&ck_path)?;
        return Ok(rows);
    }
    while trainer.step() < steps {
        let loss = trainer.step_on(&data.train)?;
        window.0 += loss;
        window.1 += 1;
        let t = trainer.step();
        if (tc.eval_every > 0 && t.is_multiple_of(tc.eval_every)) || t == steps {
            let row = MetricsRow {
                step: t,
                train_bits: window.0 / window.1 as f64,
                valid_bits: evaluate(trainer.model(), &data.valid)?,
                wall_ms: started.elapsed().as_millis(),
            };
            writeln!(metrics, "{}", row.to_csv())?;
            metrics.flush()?;
            on_row(&row);
            rows.push(row);
            window = (0.0, 0);
        }
        if (tc.checkpoint_every > 0 && t.is_multiple_of(tc.checkpoint_every)) || t == steps {
            trainer.checkpoint().save(&ck_path)?;
        }
    }
    Ok(rows)
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
