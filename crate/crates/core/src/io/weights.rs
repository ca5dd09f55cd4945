//! `RSPK` weight container: a flat list of named, typed, row-major tensors.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real};

pub const WEIGHT_MAGIC: &[u8; 4] = b"RSPK";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn from_real<T: Real>(values: &[T]) -> Self {
        match T::PRECISION {
            Precision::Single => {
                TensorData::F32(values.iter().map(|v| v.as_f64() as f32).collect())
            }
            Precision::Double => TensorData::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            TensorData::F32(_) => Precision::Single,
            TensorData::F64(_) => Precision::Double,
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("weight file", reason)
}

pub fn encode_weights(entries: &[NamedTensor]) -> Result<Vec<u8>> {
    let count = u32::try_from(entries.len()).map_err(|_| bad("too many tensors"))?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| bad(format!("tensor name `{}` is too long", e.name)))?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| bad(format!("tensor `{}` has too many dimensions", e.name)))?;
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(bad(format!(
                "tensor `{}` holds {} values but its shape {:?} needs {}",
                e.name,
                e.data.len(),
                e.shape,
                e.shape.iter().product::<usize>()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype());
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| bad(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                bad(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != WEIGHT_MAGIC {
        return Err(bad("missing RSPK magic"));
    }
    let version = cur.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
        let dtype = cur.u8("dtype")?;
        let rank = cur.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("tensor `{name}` is too large")))?;
        let data = match dtype {
            0 => {
                let raw = cur.take(
                    len.checked_mul(4).ok_or_else(|| bad("tensor too large"))?,
                    &name,
                )?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let raw = cur.take(
                    len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?,
                    &name,
                )?;
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(bad(format!("tensor `{name}` has unknown dtype {other}"))),
        };
        entries.push(NamedTensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(entries)
}

pub fn write_weights(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let bytes = encode_weights(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}
