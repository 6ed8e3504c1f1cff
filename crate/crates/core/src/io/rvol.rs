//! RVOL: `"RVOL" | u16 version | u16 dtype (0 = f32) | u32 D, H, W |
//! f32 spacing z, y, x (mm) | little-endian row-major payload`.

use std::path::Path;

use super::IoError;
use crate::tensor::{Int3, Tensor};

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const RVOL_VERSION: u16 = 1;
const DTYPE_F32: u16 = 0;
const HEADER_LEN: usize = 4 + 2 + 2 + 12 + 12;

/// A scalar volume `[D, H, W]` with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn dims(&self) -> Int3 {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(RVOL_MAGIC);
        out.extend_from_slice(&RVOL_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in self.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != RVOL_MAGIC {
            return Err("bad magic (expected \"RVOL\")".into());
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != RVOL_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dtype = u16_at(6);
        if dtype != DTYPE_F32 {
            return Err(format!("unsupported dtype code {dtype}"));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let spacing = [20, 24, 28].map(|i| f32::from_bits(u32_at(i)));
        let n: usize = dims.iter().product();
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), 4 * n));
        }
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let data = Tensor::new(dims.to_vec(), data).map_err(|e| e.to_string())?;
        Ok(Self { data, spacing })
    }
}

pub fn write_rvol(path: &Path, volume: &Volume) -> Result<(), IoError> {
    std::fs::write(path, volume.to_bytes()).map_err(|e| IoError::file(path, e))
}

pub fn read_rvol(path: &Path) -> Result<Volume, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::file(path, e))?;
    Volume::from_bytes(&bytes).map_err(|m| IoError::format(path, m))
}
