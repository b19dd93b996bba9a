//! Binary containers.
//!
//! A tensor record is `"AXT1"`, a `u8` dtype tag (0 real64, 1 real32,
//! 2 int32), a `u8` rank, `rank` little-endian `u32` extents, then the
//! little-endian payload. Files may hold several records back to back.
//!
//! A checkpoint is `"AXCK"`, `u32` version, `u64` optimizer step, a `u32`
//! length-prefixed UTF-8 config text, a `u32` record count and that many
//! named records (`u32` name length, name bytes, tensor record). Parameter
//! records are named `param/<name>`; Adam moments `m/<name>` and `v/<name>`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::autodiff::ParameterStore;
use crate::config::RunConfig;
use crate::data::DataTensor;
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"AXT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One decoded tensor record.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Real { dtype: DType, tensor: Tensor },
    Int { shape: Vec<usize>, data: Vec<i32> },
}

fn write_header<W: Write>(w: &mut W, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format("rank exceeds 255".into()));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[dtype.tag(), shape.len() as u8])?;
    for &e in shape {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a real tensor with a `Real64` or `Real32` payload.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    write_header(w, dtype, t.shape())?;
    match dtype {
        DType::Real64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::Real32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::Int32 => return Err(Error::Format("real tensor cannot be written as int32".into())),
    }
    Ok(())
}

pub fn write_symbols<W: Write>(w: &mut W, x: &DataTensor) -> Result<()> {
    write_header(w, DType::Int32, &x.shape())?;
    for &v in x.data() {
        let v = i32::try_from(v).map_err(|_| Error::Format("symbol exceeds int32".into()))?;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("truncated record".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| if e.kind() == io::ErrorKind::UnexpectedEof { Error::Format("truncated record".into()) } else { e.into() })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().expect("4 bytes")))
}

/// Reads the next record, or `None` at a clean end of input.
pub fn read_record<R: Read>(r: &mut R) -> Result<Option<Record>> {
    let mut magic = [0u8; 4];
    if !read_exact_or_eof(r, &mut magic)? {
        return Ok(None);
    }
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let head = read_bytes(r, 2)?;
    let dtype = DType::from_tag(head[0]).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", head[0])))?;
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    if shape.contains(&0) {
        return Err(Error::Format("zero extent".into()));
    }
    let n: usize = shape.iter().product();
    let record = match dtype {
        DType::Real64 => {
            let bytes = read_bytes(r, n * 8)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            Record::Real { dtype, tensor: Tensor::new(&shape, data)? }
        }
        DType::Real32 => {
            let bytes = read_bytes(r, n * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect();
            Record::Real { dtype, tensor: Tensor::new(&shape, data)? }
        }
        DType::Int32 => {
            let bytes = read_bytes(r, n * 4)?;
            let data = bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect();
            Record::Int { shape, data }
        }
    };
    Ok(Some(record))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    match read_record(r)? {
        Some(Record::Real { tensor, .. }) => Ok(tensor),
        Some(Record::Int { .. }) => Err(Error::Format("expected a real tensor, found int32".into())),
        None => Err(Error::Format("unexpected end of input".into())),
    }
}

fn symbols_from_record(shape: Vec<usize>, data: Vec<i32>) -> Result<DataTensor> {
    if shape.len() != 3 {
        return Err(Error::Format(format!("symbol tensor must be rank 3, got {shape:?}")));
    }
    let data = data
        .into_iter()
        .map(|v| u32::try_from(v).map_err(|_| Error::Format(format!("negative symbol {v}"))))
        .collect::<Result<Vec<_>>>()?;
    DataTensor::new(shape[0], shape[1], shape[2], data)
}

/// Reads every record of a stream of int32 rank-3 tensors.
pub fn read_all_symbols<R: Read>(r: &mut R) -> Result<Vec<DataTensor>> {
    let mut out = Vec::new();
    while let Some(rec) = read_record(r)? {
        match rec {
            Record::Int { shape, data } => out.push(symbols_from_record(shape, data)?),
            Record::Real { .. } => return Err(Error::Format("expected int32 symbols".into())),
        }
    }
    Ok(out)
}

pub fn save_symbols(path: &Path, x: &DataTensor) -> Result<()> {
    let mut buf = Vec::new();
    write_symbols(&mut buf, x)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_symbols(path: &Path) -> Result<DataTensor> {
    let bytes = fs::read(path)?;
    let mut all = read_all_symbols(&mut bytes.as_slice())?;
    if all.len() != 1 {
        return Err(Error::Format(format!("expected one tensor, found {}", all.len())));
    }
    Ok(all.remove(0))
}

/// Plain PGM (one channel) or PPM (three channels) with `maxval = vocab - 1`.
pub fn write_pnm<W: Write>(w: &mut W, x: &DataTensor, vocab: usize) -> Result<()> {
    let magic = match x.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Usage(format!("PNM export needs 1 or 3 channels, got {c}"))),
    };
    if !(2..=256).contains(&vocab) {
        return Err(Error::Usage(format!("PNM export needs 2..=256 symbols, got {vocab}")));
    }
    write!(w, "{magic}\n{} {}\n{}\n", x.width(), x.height(), vocab - 1)?;
    let bytes: Vec<u8> = x.data().iter().map(|&v| v as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Model parameters plus everything needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub store: ParameterStore,
}

fn write_named<W: Write>(w: &mut W, name: &str, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, t, dtype)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let text = self.config.to_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&((self.store.len() * 3) as u32).to_le_bytes())?;
        let dtype = self.config.train.dtype;
        for (name, p) in self.store.iter() {
            write_named(&mut w, &format!("param/{name}"), &p.value, dtype)?;
            write_named(&mut w, &format!("m/{name}"), &p.m, DType::Real64)?;
            write_named(&mut w, &format!("v/{name}"), &p.v, DType::Real64)?;
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic = read_bytes(&mut r, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = u64::from_le_bytes(read_bytes(&mut r, 8)?.try_into().expect("8"));
        let len = read_u32(&mut r)? as usize;
        let text = String::from_utf8(read_bytes(&mut r, len)?)
            .map_err(|_| Error::Format("config header is not UTF-8".into()))?;
        let config = RunConfig::parse(&text).map_err(|e| Error::Format(format!("config header: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::new();
        let mut moments = std::collections::HashMap::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, nlen)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let t = read_tensor(&mut r)?;
            if let Some(n) = name.strip_prefix("param/") {
                params.push((n.to_string(), t));
            } else if name.starts_with("m/") || name.starts_with("v/") {
                moments.insert(name, t);
            } else {
                return Err(Error::Format(format!("unknown record {name}")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let mut store = ParameterStore::new();
        for (name, t) in params {
            store.insert(&name, t).map_err(|e| Error::Format(e.to_string()))?;
            let m = moments.remove(&format!("m/{name}"));
            let v = moments.remove(&format!("v/{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                store.set_moments(&name, m, v).map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        Ok(Self { config, step, store })
    }

    /// Writes to a temporary sibling and renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn real64_roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let shape = if shape.is_empty() { vec![1] } else { shape };
            let t = Tensor::randn(&shape, 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t, DType::Real64).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }

        #[test]
        fn symbols_roundtrip(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let x = DataTensor::random(h, w, c, 300, &mut Rng::new(seed));
            let mut buf = Vec::new();
            write_symbols(&mut buf, &x).unwrap();
            write_symbols(&mut buf, &x).unwrap();
            let all = read_all_symbols(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(all, vec![x.clone(), x]);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::Real32).unwrap();
        assert_eq!(&buf[..4], b"AXT1");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..14], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(buf.len(), 14 + 6 * 4);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(read_record(&mut &b"AXT2\x00\x00"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[4]), DType::Real64).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_record(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_header() {
        let x = DataTensor::new(2, 3, 1, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let mut buf = Vec::new();
        write_pnm(&mut buf, &x, 4).unwrap();
        assert_eq!(&buf[..9], b"P5\n3 2\n3\n");
        assert_eq!(&buf[9..], &[0, 1, 2, 3, 0, 1]);
        assert!(write_pnm(&mut Vec::new(), &DataTensor::zeros(1, 1, 2), 4).is_err());
    }
}
