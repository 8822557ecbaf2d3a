//! FVOL: a little-endian binary container for one `[T, H, W, C]` feature volume.
//!
//! Layout: `b"FVOL"`, then `u32` version, `u32` dtype, and `u32` T, H, W, C,
//! followed by the row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use ata_core::alignment::FeatureVolume;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"FVOL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 * 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serializes `x`; values are narrowed to `f32` when `dtype` is [`Dtype::F32`].
pub fn encode(x: &FeatureVolume, dtype: Dtype) -> CliResult<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + x.values().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    for d in x.dims() {
        let d = u32::try_from(d).map_err(|_| CliError::data(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => x.values().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => x.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

pub fn decode(bytes: &[u8]) -> CliResult<(FeatureVolume, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(CliError::data(format!(
            "FVOL header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::data(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(CliError::data(format!("unsupported FVOL version {version}")));
    }
    let code = read_u32(bytes, 8);
    let dtype = Dtype::from_code(code).ok_or_else(|| CliError::data(format!("unknown dtype code {code}")))?;
    let dims: Vec<usize> = (0..4).map(|i| read_u32(bytes, 12 + 4 * i) as usize).collect();
    let expected = dims
        .iter()
        .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CliError::data("FVOL dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(CliError::data(format!(
            "payload is {} bytes, dimensions {dims:?} need {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect(),
    };
    let volume = FeatureVolume::new(dims[0], dims[1], dims[2], dims[3], values)
        .map_err(|e| CliError::data(e.to_string()))?;
    Ok((volume, dtype))
}

pub fn read(path: &Path) -> CliResult<(FeatureVolume, Dtype)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path))
}

/// Writes the encoded volume and returns the bytes written.
pub fn write(path: &Path, x: &FeatureVolume, dtype: Dtype) -> CliResult<Vec<u8>> {
    let bytes = encode(x, dtype)?;
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))?;
    Ok(bytes)
}
