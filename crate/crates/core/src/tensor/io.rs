//! FSTN binary tensor files.
//!
//! Layout: `b"FSTN"`, version byte `0x01`, dtype byte (`0` = f32, `1` = f64),
//! rank byte, then `rank` little-endian `u32` extents, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const FSTN_MAGIC: &[u8; 4] = b"FSTN";
pub const FSTN_VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn to_fstn_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.rank() + self.len() * T::DTYPE.size());
        out.extend_from_slice(FSTN_MAGIC);
        out.push(FSTN_VERSION);
        out.push(T::DTYPE.code());
        out.push(self.rank() as u8);
        for &d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data() {
            v.write_le(&mut out);
        }
        out
    }
}

fn decode_body<T: Element>(dims: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let sz = T::DTYPE.size();
    let data = payload.chunks_exact(sz).map(T::read_le).collect();
    Tensor::new(dims, data)
}

impl AnyTensor {
    pub fn from_fstn_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 7 || &bytes[..4] != FSTN_MAGIC {
            return Err("missing FSTN magic".into());
        }
        if bytes[4] != FSTN_VERSION {
            return Err(format!("unsupported version {:#04x}", bytes[4]));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| format!("bad dtype byte {}", bytes[5]))?;
        let rank = bytes[6] as usize;
        let header = 7 + 4 * rank;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let dims: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != n * dtype.size() {
            return Err(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                n * dtype.size()
            ));
        }
        let t = match dtype {
            DType::F32 => decode_body::<f32>(dims, payload).map(AnyTensor::F32),
            DType::F64 => decode_body::<f64>(dims, payload).map(AnyTensor::F64),
        };
        t.map_err(|e| e.to_string())
    }
}

pub fn write_fstn<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_fstn_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_fstn(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AnyTensor::from_fstn_bytes(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Read a tensor and convert it to `T` if the stored dtype differs.
pub fn read_fstn_as<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_fstn(path).map(|t| t.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_fstn_bytes();
        assert_eq!(&b[..4], b"FSTN");
        assert_eq!(b[4], 0x01);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(&b[19..23], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::<f64>::ones([3]);
        let mut b = t.to_fstn_bytes();
        b.pop();
        assert!(AnyTensor::from_fstn_bytes(&b).is_err());
        b[0] = b'X';
        assert!(AnyTensor::from_fstn_bytes(&b).is_err());
    }
}
