//! `PUQT` binary tensor container and 16-bit PGM export.
//!
//! Layout: magic `PUQT`, version u8 = 1, dtype u8 (1 = f32, 2 = f64), rank u8,
//! rank × u32 LE dims, row-major LE payload, then optionally a u32 LE length
//! followed by that many bytes of UTF-8 metadata.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PUQT";
pub const VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("metadata is not valid UTF-8")]
    BadMetadata,
    #[error("payload of {len} values does not match dims {dims:?}")]
    ShapeMismatch { dims: Vec<usize>, len: usize },
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error("rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
    pub metadata: Option<String>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch { dims, len: data.len() });
        }
        Ok(Self { dims, data, metadata: None })
    }

    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn with_metadata(mut self, meta: impl Into<String>) -> Self {
        self.metadata = Some(meta.into());
        self
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|x| f64::from(*x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        if self.dims.len() > 255 {
            return Err(TensorError::RankTooLarge(self.dims.len()));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype_code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d32 = u32::try_from(d).map_err(|_| TensorError::DimTooLarge(d))?;
            out.extend_from_slice(&d32.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        if let Some(meta) = &self.metadata {
            let len = u32::try_from(meta.len()).map_err(|_| TensorError::DimTooLarge(meta.len()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(meta.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let version = cur.take(1, "version")?[0];
        if version != VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let dtype = cur.take(1, "dtype")?[0];
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dims")? as usize);
        }
        let count: usize = dims.iter().product();
        let data = match dtype {
            1 => TensorData::F32(
                cur.take(count * 4, "payload")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            2 => TensorData::F64(
                cur.take(count * 8, "payload")?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            other => return Err(TensorError::UnknownDtype(other)),
        };
        let metadata = if cur.remaining() == 0 {
            None
        } else {
            let len = cur.u32("metadata length")? as usize;
            let raw = cur.take(len, "metadata")?;
            Some(String::from_utf8(raw.to_vec()).map_err(|_| TensorError::BadMetadata)?)
        };
        if cur.remaining() != 0 {
            return Err(TensorError::TrailingBytes(cur.remaining()));
        }
        Ok(Self { dims, data, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes()?).map_err(|e| TensorError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let bytes = fs::read(path).map_err(|e| TensorError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).ok_or(TensorError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(TensorError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Binary 16-bit PGM of a `h × w` image, min-max scaled to 0..65535. The
/// scale is recorded in a header comment.
pub fn to_pgm16(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n# min {lo:.17e} max {hi:.17e}\n{w} {h}\n65535\n").into_bytes();
    for v in values {
        let q = (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}
