//! `axial`: train, sample, audit, benchmark and evaluate Axial Transformer
//! models.
//!
//! Exit codes: 0 success or audit pass, 1 audit failure or runtime failure,
//! 2 usage error (bad flags, config, files).

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use axial_core::attention::AttentionMode;
use axial_core::audit::{self, DEFAULT_TRIALS};
use axial_core::data::{load_manifest, synth_dataset, write_dataset, Split, SynthKind};
use axial_core::format::{self, Checkpoint};
use axial_core::layers::Init;
use axial_core::model::{Fault, Model};
use axial_core::sampler::{episode_rng, sample_traced, SamplerMode};
use axial_core::tensor::DType;
use axial_core::trainer::{self, checkpoint_path, evaluate, evaluate_slices, Trainer};
use axial_core::{Error, Rng, RunConfig};
use clap::{Args, Parser, Subcommand};

const THREADS_ENV: &str = "AXIAL_NUM_THREADS";

/// Parameter scale of the random models built for audits.
const AUDIT_INIT: Init = Init::Dense { std: 0.2 };

#[derive(Parser)]
#[command(name = "axial", version, about = "Axial Transformer for multidimensional symbol tensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config and a dataset manifest; resumes from OUT/checkpoint.axck.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Causality audit and sampler equivalence on a random model or checkpoint.
    Audit(AuditArgs),
    /// Time axial and full attention over growing image sides; CSV on stdout.
    Bench(BenchArgs),
    /// Exact bits/dim of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write a synthetic dataset shaped by a config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Manifest of `path<TAB>split` lines.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Total step count, overriding the config.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    dtype: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// `naive` or `semi`.
    #[arg(long, default_value = "semi")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dtype: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    /// Build a random model from this config (built-in defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    /// Sampler-equivalence seeds `0..N`.
    #[arg(long, default_value_t = 2)]
    sampler_seeds: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Directory for causality.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for uniformity; audits always run in real64.
    #[arg(long)]
    dtype: Option<String>,
    /// Evaluate a deliberately broken model.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// `axial`, `full` or `both`.
    #[arg(long, default_value = "both")]
    mode: String,
    /// Minimum milliseconds per timing sample.
    #[arg(long, default_value_t = 20.0)]
    min_ms: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "valid")]
    split: String,
    #[arg(long)]
    dtype: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// `stripes`, `gradients` or `shifted-constant-video`.
    #[arg(long)]
    kind: String,
    /// Shape and vocabulary come from this config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Config(_) | Error::Format(_) | Error::Io(_) => Failure::Usage(e.to_string()),
            Error::Numeric(_) | Error::Shape { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<bool, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_dtype(s: &Option<String>) -> std::result::Result<Option<DType>, Failure> {
    match s.as_deref() {
        None => Ok(None),
        Some(v) => match DType::parse(v) {
            Some(d @ (DType::Real32 | DType::Real64)) => Ok(Some(d)),
            _ => Err(usage(format!("--dtype must be real32 or real64, got `{v}`"))),
        },
    }
}

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, dtype: Option<DType>) -> std::result::Result<Model, Failure> {
    let ck = Checkpoint::load(path).map_err(|e| usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
    let mut model = Model::from_parts(ck.config.model, ck.store)?;
    if let Some(d) = dtype {
        trainer::apply_storage_dtype(&mut model, d);
    }
    Ok(model)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut run = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        run.train.steps = steps;
    }
    if let Some(d) = parse_dtype(&a.dtype)? {
        run.train.dtype = d;
    }
    let data = load_manifest(&a.data, run.model.vocab)?;
    let ck = checkpoint_path(&a.out);
    let mut t = if ck.exists() {
        let loaded = Checkpoint::load(&ck)?;
        if loaded.config.model != run.model {
            return Err(usage(format!("{} was trained with a different model config", ck.display())));
        }
        eprintln!("resuming from {} at step {}", ck.display(), loaded.step);
        Trainer::from_checkpoint(Checkpoint { config: run, ..loaded })?
    } else {
        Trainer::new(run)?
    };
    let steps = run.train.steps;
    trainer::train_loop(&mut t, &data, &a.out, steps, |row| {
        println!(
            "step {:>6}  train {:.4}  valid {:.4} bits/dim  {} ms",
            row.step, row.train_bits, row.valid_bits, row.wall_ms
        );
    })?;
    Ok(true)
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    let mode = SamplerMode::parse(&a.mode).ok_or_else(|| usage(format!("unknown sampler mode `{}`", a.mode)))?;
    let model = load_model(&a.checkpoint, parse_dtype(&a.dtype)?)?;
    if a.n == 0 {
        return Ok(true);
    }
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let cfg = *model.config();
    for k in 0..a.n {
        let start = Instant::now();
        let trace = sample_traced(&model, mode, &mut episode_rng(a.seed, k as u64), a.temperature)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let stem = a.out.join(format!("sample_{k:03}"));
        format::save_symbols(&stem.with_extension("axt"), &trace.sample)?;
        if cfg.channels == 1 || cfg.channels == 3 {
            let ext = if cfg.channels == 1 { "pgm" } else { "ppm" };
            let f = fs::File::create(stem.with_extension(ext)).map_err(Error::from)?;
            format::write_pnm(&mut BufWriter::new(f), &trace.sample, cfg.vocab)?;
        }
        println!("sample {k}: {ms:.1} ms ({})", mode.name());
    }
    Ok(true)
}

fn cmd_audit(a: AuditArgs) -> CmdResult {
    if parse_dtype(&a.dtype)? == Some(DType::Real32) {
        eprintln!("note: audits run in real64");
    }
    let mut model = match (&a.checkpoint, &a.config) {
        (Some(ck), _) => load_model(ck, None)?,
        (None, cfg) => {
            let run = match cfg {
                Some(p) => load_config(p)?,
                None => RunConfig::default(),
            };
            Model::new(run.model, AUDIT_INIT, &mut Rng::new(a.seed))?
        }
    };
    if a.inject_fault {
        model = model.with_fault(Fault::MissingShiftDown);
    }
    let report = audit::causality_audit(&model, a.trials, a.seed)?;
    println!("{}", report.summary());
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(Error::from)?;
        fs::write(out.join("causality.csv"), report.to_csv()).map_err(Error::from)?;
    }
    let seeds: Vec<u64> = (0..a.sampler_seeds).collect();
    let eq = audit::sampler_equivalence_suite(std::slice::from_ref(&model), &seeds, a.temperature)?;
    println!("{}", eq.summary());
    let pass = report.passes() && eq.passes();
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let modes = match a.mode.as_str() {
        "axial" => vec![AttentionMode::Axial],
        "full" => vec![AttentionMode::Full],
        "both" => vec![AttentionMode::Axial, AttentionMode::Full],
        m => return Err(usage(format!("unknown bench mode `{m}`"))),
    };
    let mut rows = Vec::new();
    for m in modes {
        let r = audit::scaling_bench(&a.sizes, a.dim, m, a.min_ms, a.seed)?;
        if r.len() >= 2 {
            eprintln!("{} exponent {:.3}", audit::mode_name(m), audit::fit_exponent(&r)?);
        }
        rows.extend(r);
    }
    let csv = audit::bench_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::write(out, &csv).map_err(Error::from)?;
    }
    Ok(true)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let split = Split::parse(&a.split).ok_or_else(|| usage(format!("unknown split `{}`", a.split)))?;
    let model = load_model(&a.checkpoint, parse_dtype(&a.dtype)?)?;
    let data = load_manifest(&a.data, model.config().vocab)?;
    let images = data.split(split);
    let bits = evaluate(&model, images)?;
    println!("{} bits/dim: {bits:.6}", split.name());
    if model.config().channels > 1 {
        for (c, b) in evaluate_slices(&model, images)?.iter().enumerate() {
            println!("  channel {c}: {b:.6}");
        }
    }
    Ok(true)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let kind = SynthKind::parse(&a.kind).ok_or_else(|| usage(format!("unknown dataset kind `{}`", a.kind)))?;
    let m = load_config(&a.config)?.model;
    let ds = synth_dataset(kind, m.height, m.width, m.channels, m.vocab, a.n, a.seed)?;
    let manifest = write_dataset(&ds, &a.out)?;
    println!("{}", manifest.display());
    Ok(true)
}

fn configure_threads() -> std::result::Result<(), Failure> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
