//! Empirical checks: dependency audits by perturbation, attention timing
//! scans, and the sampler equivalence battery.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::attention::{attention_core, pair_count, AttentionMode};
use crate::data::DataTensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::sampler::{sample_naive_traced, sample_semi_parallel_traced};
use crate::tensor::Tensor;

/// Perturbation trials per input position unless told otherwise.
pub const DEFAULT_TRIALS: usize = 3;

/// Position `(i, j, c)` in channel-major raster order.
pub fn order_index(shape: [usize; 3], i: usize, j: usize, c: usize) -> usize {
    (c * shape[0] + i) * shape[1] + j
}

pub fn order_position(shape: [usize; 3], t: usize) -> (usize, usize, usize) {
    let hw = shape[0] * shape[1];
    (t % hw / shape[1], t % shape[1], t / hw)
}

/// `T × T` dependency matrix: entry `(s, t)` is set when perturbing input
/// position `s` changed the logits at position `t` in some trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalityReport {
    pub shape: [usize; 3],
    pub trials: usize,
    deps: Vec<bool>,
}

impl CausalityReport {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depends(&self, s: usize, t: usize) -> bool {
        self.deps[s * self.len() + t]
    }

    /// Pairs `(s, t)` with `t ≤ s` where `t` nonetheless depends on `s`.
    pub fn violations(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for s in 0..n {
            for t in 0..=s {
                if self.depends(s, t) {
                    out.push((s, t));
                }
            }
        }
        out
    }

    pub fn passes(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn dependency_count(&self) -> usize {
        self.deps.iter().filter(|&&d| d).count()
    }

    /// One `source,target` line per detected dependency, positions given as
    /// raster-channel indices.
    pub fn to_csv(&self) -> String {
        let n = self.len();
        let mut s = String::from("source,target\n");
        for a in 0..n {
            for b in 0..n {
                if self.depends(a, b) {
                    let _ = writeln!(s, "{a},{b}");
                }
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let v = self.violations();
        let [h, w, c] = self.shape;
        match v.first() {
            None => format!(
                "causality {h}x{w}x{c}: PASS ({} dependencies, {} trials)",
                self.dependency_count(),
                self.trials
            ),
            Some(&(s, t)) => format!(
                "causality {h}x{w}x{c}: FAIL ({} violations; first: position {t} {:?} depends on {s} {:?})",
                v.len(),
                order_position(self.shape, t),
                order_position(self.shape, s)
            ),
        }
    }
}

fn all_logits(model: &Model, x: &DataTensor) -> Result<Vec<Tensor>> {
    (0..model.config().channels).map(|c| model.forward_logits(x, c)).collect()
}

fn changed_positions(shape: [usize; 3], vocab: usize, a: &[Tensor], b: &[Tensor], out: &mut [bool]) {
    let [h, w, _] = shape;
    for (c, (ta, tb)) in a.iter().zip(b).enumerate() {
        let (da, db) = (ta.data(), tb.data());
        for i in 0..h {
            for j in 0..w {
                let o = (i * w + j) * vocab;
                if da[o..o + vocab] != db[o..o + vocab] {
                    out[order_index(shape, i, j, c)] = true;
                }
            }
        }
    }
}

/// Perturbs every input position in turn, replacing its symbol with a
/// different random one, and records which output logits change (exact
/// comparison). Trial `k` uses one random base tensor shared by all positions.
pub fn causality_audit(model: &Model, trials: usize, seed: u64) -> Result<CausalityReport> {
    let cfg = *model.config();
    let shape = [cfg.height, cfg.width, cfg.channels];
    let n = cfg.dims();
    if cfg.vocab < 2 {
        return Err(Error::Usage("perturbation needs a vocabulary of at least 2".into()));
    }
    let root = Rng::new(seed);
    let bases: Vec<DataTensor> = (0..trials)
        .map(|k| DataTensor::random(cfg.height, cfg.width, cfg.channels, cfg.vocab, &mut root.split(k as u64)))
        .collect();
    let base_logits: Vec<Vec<Tensor>> = bases.iter().map(|x| all_logits(model, x)).collect::<Result<_>>()?;
    let rows: Vec<Result<Vec<bool>>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut row = vec![false; n];
            let (i, j, c) = order_position(shape, s);
            let mut rng = root.split((trials + s) as u64);
            for (x, base) in bases.iter().zip(&base_logits) {
                let old = x.get(i, j, c) as usize;
                let new = (old + 1 + rng.below(cfg.vocab - 1)) % cfg.vocab;
                let mut y = x.clone();
                y.set(i, j, c, new as u32);
                let out = all_logits(model, &y)?;
                changed_positions(shape, cfg.vocab, base, &out, &mut row);
            }
            Ok(row)
        })
        .collect();
    let mut deps = Vec::with_capacity(n * n);
    for r in rows {
        deps.extend(r?);
    }
    Ok(CausalityReport { shape, trials, deps })
}

/// Timing of one attention layer at side length `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub side: usize,
    pub mode: AttentionMode,
    pub pairs: u128,
    pub ms: f64,
}

pub fn mode_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::Axial => "axial",
        AttentionMode::Full => "full",
    }
}

pub const BENCH_HEADER: &str = "S,mode,pairs,ms";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6}", r.side, mode_name(r.mode), r.pairs, r.ms);
    }
    s
}

/// Fastest of seven samples of milliseconds per call of `f`, each sample
/// averaging enough calls to span at least `min_ms`. The minimum is the
/// estimate least disturbed by other load on the machine.
fn time_ms(mut f: impl FnMut() -> Result<()>, min_ms: f64) -> Result<f64> {
    f()?;
    let mut samples = Vec::new();
    for _ in 0..7 {
        let start = Instant::now();
        let mut calls = 0u32;
        loop {
            f()?;
            calls += 1;
            let el = start.elapsed().as_secs_f64() * 1e3;
            if el >= min_ms {
                samples.push(el / calls as f64);
                break;
            }
        }
    }
    Ok(samples.into_iter().fold(f64::INFINITY, f64::min))
}

/// Times single-head attention over an `S × S` grid of `dim`-vectors: along
/// one axis (`S` sequences of length `S`) for axial, over all `S²`
/// positions as one sequence for full.
pub fn scaling_bench(sizes: &[usize], dim: usize, mode: AttentionMode, min_ms: f64, seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("bench sizes must be strictly increasing".into()));
    }
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    for &s in sizes {
        let shape = match mode {
            AttentionMode::Axial => [s, s, dim],
            AttentionMode::Full => [1, s * s, dim],
        };
        let q = Tensor::randn(&shape, 1.0, &mut rng);
        let k = Tensor::randn(&shape, 1.0, &mut rng);
        let v = Tensor::randn(&shape, 1.0, &mut rng);
        let ms = time_ms(|| attention_core(&q, &k, &v, 1, 1, false).map(|_| ()), min_ms)?;
        rows.push(BenchRow { side: s, mode, pairs: pair_count(s as u64, 2, mode), ms });
    }
    Ok(rows)
}

/// Least-squares slope of `ln ms` against `ln S`.
pub fn fit_exponent(rows: &[BenchRow]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Usage("need at least two sizes to fit an exponent".into()));
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.side as f64).ln(), r.ms.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// Where naive and semi-parallel sampling first disagree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub logit_diff: f64,
    pub naive_symbol: u32,
    pub semi_symbol: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceCase {
    pub model: usize,
    pub seed: u64,
    /// Largest logit difference up to (and including) the first divergence.
    pub max_logit_diff: f64,
    pub divergence: Option<Divergence>,
}

impl EquivalenceCase {
    pub fn passes(&self) -> bool {
        self.divergence.is_none() && self.max_logit_diff < 1e-10
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EquivalenceReport {
    pub cases: Vec<EquivalenceCase>,
}

impl EquivalenceReport {
    pub fn passes(&self) -> bool {
        self.cases.iter().all(EquivalenceCase::passes)
    }

    pub fn max_logit_diff(&self) -> f64 {
        self.cases.iter().map(|c| c.max_logit_diff).fold(0.0, f64::max)
    }

    pub fn first_failure(&self) -> Option<&EquivalenceCase> {
        self.cases.iter().find(|c| !c.passes())
    }

    pub fn summary(&self) -> String {
        match self.first_failure() {
            None => format!(
                "sampler equivalence: PASS ({} cases, max logit diff {:e})",
                self.cases.len(),
                self.max_logit_diff()
            ),
            Some(c) => {
                let at = match c.divergence {
                    Some(d) => format!(
                        "row {} col {} channel {}, logit diff {:e}, symbols {} vs {}",
                        d.row, d.col, d.channel, d.logit_diff, d.naive_symbol, d.semi_symbol
                    ),
                    None => format!("logit diff {:e}", c.max_logit_diff),
                };
                format!("sampler equivalence: FAIL (model {} seed {}: {at})", c.model, c.seed)
            }
        }
    }
}

fn compare(model: &Model, index: usize, seed: u64, temperature: f64) -> Result<EquivalenceCase> {
    let a = sample_naive_traced(model, &mut Rng::new(seed), temperature)?;
    let b = sample_semi_parallel_traced(model, &mut Rng::new(seed), temperature)?;
    let shape = a.sample.shape();
    let mut max = 0.0f64;
    let mut divergence = None;
    for (t, (la, lb)) in a.logits.iter().zip(&b.logits).enumerate() {
        let diff = la.iter().zip(lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        max = max.max(diff);
        let (i, j, c) = order_position(shape, t);
        let (sa, sb) = (a.sample.get(i, j, c), b.sample.get(i, j, c));
        if la != lb || sa != sb {
            divergence = Some(Divergence {
                row: i,
                col: j,
                channel: c,
                logit_diff: diff,
                naive_symbol: sa,
                semi_symbol: sb,
            });
            break;
        }
    }
    Ok(EquivalenceCase { model: index, seed, max_logit_diff: max, divergence })
}

/// Runs both samplers for every model and seed and compares logits and
/// symbols position by position. Divergence means any logit is not
/// bit-identical or any symbol differs.
pub fn sampler_equivalence_suite(models: &[Model], seeds: &[u64], temperature: f64) -> Result<EquivalenceReport> {
    let grid: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let cases: Vec<Result<EquivalenceCase>> = grid
        .par_iter()
        .map(|&(m, s)| compare(&models[m], m, s, temperature))
        .collect();
    Ok(EquivalenceReport { cases: cases.into_iter().collect::<Result<_>>()? })
}
