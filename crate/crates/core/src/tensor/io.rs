//! PNLT binary tensor files.
//!
//! Layout: magic `PNLT`, then u8 version (1), u8 dtype (0 = binary32,
//! 1 = binary64), u8 rank, u8 reserved (0), `rank` little-endian u64 dims,
//! and a row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::{DType, Shape5, VideoFeature};
use crate::error::{PnlError, Result};

pub const MAGIC: [u8; 4] = *b"PNLT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

/// A tensor of arbitrary rank as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(dtype: DType, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(PnlError::shape(format!(
                "dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(RawTensor { dtype, dims, data })
    }

    pub fn from_feature(x: &VideoFeature) -> Self {
        RawTensor {
            dtype: x.dtype(),
            dims: x.shape().dims().to_vec(),
            data: x.data().to_vec(),
        }
    }

    pub fn into_feature(self) -> Result<VideoFeature> {
        let shape = Shape5::from_dims(&self.dims)?;
        VideoFeature::with_dtype(shape, self.dtype, self.data)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let rank = u8::try_from(self.dims.len())
            .map_err(|_| PnlError::shape(format!("rank {} exceeds 255", self.dims.len())))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dims.len() + self.dtype.size_of() * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&[VERSION, self.dtype.code(), rank, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// `path` is only used to label errors.
    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |offset: usize, msg: String| PnlError::Parse {
            path: path.to_string(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(err(
                bytes.len(),
                format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
            ));
        }
        if bytes[..4] != MAGIC {
            return Err(err(0, "bad magic, not a PNLT file".into()));
        }
        if bytes[4] != VERSION {
            return Err(err(4, format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])
            .ok_or_else(|| err(5, format!("unsupported dtype {}", bytes[5])))?;
        let rank = bytes[6] as usize;
        if bytes[7] != 0 {
            return Err(err(7, format!("reserved byte is {}, expected 0", bytes[7])));
        }
        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(err(
                bytes.len(),
                format!("truncated dims: expected {dims_end} bytes, found {}", bytes.len()),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel: u128 = 1;
        for i in 0..rank {
            let at = HEADER_LEN + 8 * i;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            numel *= d as u128;
            dims.push(d as usize);
        }
        let expected = dims_end as u128 + numel * dtype.size_of() as u128;
        if bytes.len() as u128 != expected {
            return Err(err(
                bytes.len().min(dims_end),
                format!("payload length mismatch: expected {expected} bytes total, found {}", bytes.len()),
            ));
        }
        let payload = &bytes[dims_end..];
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(RawTensor { dtype, dims, data })
    }
}

pub fn write_raw(path: &Path, t: &RawTensor) -> Result<()> {
    fs::write(path, t.encode()?).map_err(|e| PnlError::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| PnlError::io(path, e))?;
    RawTensor::decode(&bytes, &path.display().to_string())
}

pub fn write_feature(path: &Path, x: &VideoFeature) -> Result<()> {
    write_raw(path, &RawTensor::from_feature(x))
}

pub fn read_feature(path: &Path) -> Result<VideoFeature> {
    read_raw(path)?.into_feature()
}
