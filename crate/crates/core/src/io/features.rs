//! `FEAT` feature files: `T` frames of `F` single-precision values each.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub frames: usize,
    pub bins: usize,
    /// Time-major: frame `t` occupies `data[t * bins..(t + 1) * bins]`.
    pub data: Vec<f32>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("feature file", reason)
}

impl FeatureFile {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(bad(format!(
                "{} values for {frames} frames of {bins} bins",
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    /// Builds a file from a `[1, 1, F, T]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, f, frames] = t.shape();
        if n != 1 || c != 1 {
            return Err(Error::invalid(
                "feature tensors must have shape [1, 1, F, T]",
            ));
        }
        let data = (0..frames)
            .flat_map(|ti| (0..f).map(move |fi| t.at(0, 0, fi, ti).as_f64() as f32))
            .collect();
        Self::new(frames, f, data)
    }

    /// `[1, 1, F, T]` input tensor for the backbone.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.frames == 0 || self.bins == 0 {
            return Err(bad(format!(
                "zero-length features ({} frames of {} bins)",
                self.frames, self.bins
            )));
        }
        let data = (0..self.bins)
            .flat_map(|f| (0..self.frames).map(move |t| T::of(self.data[t * self.bins + f] as f64)))
            .collect();
        Tensor::new([1, 1, self.bins, self.frames], data)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let frames = u32::try_from(self.frames).map_err(|_| bad("too many frames"))?;
        let bins = u32::try_from(self.bins).map_err(|_| bad("too many bins"))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&frames.to_le_bytes());
        out.extend_from_slice(&bins.to_le_bytes());
        self.data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(bad("missing FEAT magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != FEATURE_VERSION {
            return Err(bad(format!("unsupported version {}", word(4))));
        }
        let (frames, bins) = (word(8) as usize, word(12) as usize);
        let expected = frames
            .checked_mul(bins)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("declared size overflows"))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(bad(format!(
                "{frames} frames of {bins} bins need {expected} data bytes, found {}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { frames, bins, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { kind, reason } => Error::Format {
                kind,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}
