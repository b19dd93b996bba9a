//! Symbol tensors, datasets, synthetic generators and the manifest format.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::format;
use crate::rng::Rng;

/// An `H × W × C` tensor of integer symbols, row-major with channels last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u32>,
}

impl DataTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::shape("data tensor", &[height, width, channels], &[data.len()]));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0; height * width * channels] }
    }

    pub fn random(height: usize, width: usize, channels: usize, vocab: usize, rng: &mut Rng) -> Self {
        let data = (0..height * width * channels).map(|_| rng.below(vocab) as u32).collect();
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    fn offset(&self, i: usize, j: usize, c: usize) -> usize {
        assert!(i < self.height && j < self.width && c < self.channels, "index out of bounds");
        (i * self.width + j) * self.channels + c
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> u32 {
        self.data[self.offset(i, j, c)]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: u32) {
        let o = self.offset(i, j, c);
        self.data[o] = v;
    }

    /// The `H × W` plane of channel `c`, row-major.
    pub fn channel(&self, c: usize) -> Vec<u32> {
        assert!(c < self.channels, "channel out of range");
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn max_symbol(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        if self.max_symbol() as usize >= vocab {
            return Err(Error::Usage(format!(
                "symbol {} outside vocabulary of {vocab}",
                self.max_symbol()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            _ => None,
        }
    }
}

/// Images sharing one shape and vocabulary, split into train and valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub vocab: usize,
    pub train: Vec<DataTensor>,
    pub valid: Vec<DataTensor>,
}

impl Dataset {
    pub fn new(vocab: usize, train: Vec<DataTensor>, valid: Vec<DataTensor>) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Usage("dataset has an empty train split".into()))?;
        if valid.is_empty() {
            return Err(Error::Usage("dataset has an empty valid split".into()));
        }
        let shape = first.shape();
        for img in train.iter().chain(&valid) {
            if img.shape() != shape {
                return Err(Error::shape("dataset", &shape, &img.shape()));
            }
            img.check_vocab(vocab)?;
        }
        Ok(Self { shape, vocab, train, valid })
    }

    pub fn split(&self, split: Split) -> &[DataTensor] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
        }
    }
}

/// Synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Horizontal bands repeating every `period` rows with a random phase
    /// per image.
    Stripes { period: usize },
    /// Diagonal ramps with a random offset per image.
    Gradients,
    /// Channel-stacked frames: frame 0 is random, frame `t` is frame `t-1`
    /// moved one pixel right with zero fill.
    ShiftedVideo,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<SynthKind> {
        match s {
            "stripes" => Some(SynthKind::Stripes { period: 2 }),
            "gradients" => Some(SynthKind::Gradients),
            "shifted-constant-video" => Some(SynthKind::ShiftedVideo),
            _ => None,
        }
    }
}

fn synth_image(kind: SynthKind, h: usize, w: usize, c: usize, vocab: usize, rng: &mut Rng) -> DataTensor {
    let mut img = DataTensor::zeros(h, w, c);
    let top = (vocab - 1) as u64;
    match kind {
        SynthKind::Stripes { period } => {
            let phase = rng.below(period);
            let level = |k: usize| -> u32 {
                if period <= 1 {
                    0
                } else {
                    (k as u64 * top / (period as u64 - 1)) as u32
                }
            };
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        img.set(i, j, ch, level((i + phase + ch) % period));
                    }
                }
            }
        }
        SynthKind::Gradients => {
            let offset = rng.below(vocab) as u64;
            let span = (h + w).saturating_sub(2).max(1) as u64;
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let ramp = (i + j) as u64 * top / span;
                        img.set(i, j, ch, ((ramp + offset + ch as u64) % vocab as u64) as u32);
                    }
                }
            }
        }
        SynthKind::ShiftedVideo => {
            for i in 0..h {
                for j in 0..w {
                    img.set(i, j, 0, rng.below(vocab) as u32);
                }
            }
            for t in 1..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = if j == 0 { 0 } else { img.get(i, j - 1, t - 1) };
                        img.set(i, j, t, v);
                    }
                }
            }
        }
    }
    img
}

/// Deterministic synthetic dataset: `n` training images and `max(1, n / 4)`
/// validation images drawn from the same generator.
pub fn synth_dataset(
    kind: SynthKind,
    height: usize,
    width: usize,
    channels: usize,
    vocab: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if height == 0 || width == 0 || channels == 0 || vocab == 0 || n == 0 {
        return Err(Error::Usage("synthetic dataset parameters must be positive".into()));
    }
    if let SynthKind::Stripes { period: 0 } = kind {
        return Err(Error::Usage("stripe period must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let mut gen = |count: usize| -> Vec<DataTensor> {
        (0..count)
            .map(|_| synth_image(kind, height, width, channels, vocab, &mut rng))
            .collect()
    };
    let train = gen(n);
    let valid = gen((n / 4).max(1));
    Dataset::new(vocab, train, valid)
}

/// Writes `train.axt` and `valid.axt` (concatenated AXT1 int32 tensors) and a
/// `manifest.tsv` index into `dir`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for split in [Split::Train, Split::Valid] {
        let file = format!("{}.axt", split.name());
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        for img in dataset.split(split) {
            format::write_symbols(&mut w, img)?;
        }
        w.flush()?;
        manifest.push_str(&format!("{file}\t{}\n", split.name()));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Loads a dataset from a manifest of `path<TAB>split` lines. Relative paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: &Path, vocab: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected path<TAB>split", lineno + 1)))?;
        let split = Split::parse(split.trim())
            .ok_or_else(|| Error::Format(format!("manifest line {}: unknown split `{split}`", lineno + 1)))?;
        let mut r = BufReader::new(fs::File::open(base.join(file))?);
        let images = format::read_all_symbols(&mut r)?;
        match split {
            Split::Train => train.extend(images),
            Split::Valid => valid.extend(images),
        }
    }
    Dataset::new(vocab, train, valid)
}
