//! Self-describing binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HDTN"
//! version u32 (= 1)
//! dtype   u8  (0 = f32, 1 = f64)
//! ndim    u32
//! shape   ndim × u64
//! payload row-major, little-endian
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TENSOR_MAGIC: &[u8; 4] = b"HDTN";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A shaped, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&[S::DTYPE.tag()])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&S::to_le_bytes_vec(&self.data))?;
        Ok(())
    }

    /// Reads a tensor, converting the payload to `S` if the stored dtype differs.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format("not a tensor file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != TENSOR_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_tag(tag[0])?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * dtype.size()];
        r.read_exact(&mut bytes)?;
        let data = decode(dtype, &bytes);
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Decodes a little-endian payload of `dtype` into `S`.
pub fn decode<S: Scalar>(dtype: DType, bytes: &[u8]) -> Vec<S> {
    if dtype == S::DTYPE {
        return S::from_le_bytes_slice(bytes);
    }
    match dtype {
        DType::F32 => f32::from_le_bytes_slice(bytes)
            .into_iter()
            .map(|v| S::of(v as f64))
            .collect(),
        DType::F64 => f64::from_le_bytes_slice(bytes)
            .into_iter()
            .map(S::of)
            .collect(),
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let t = Tensor::new(vec![2, 3], vec![1.0f64, -2.5, 3.25, 0.0, 1e-300, f64::MAX]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn cross_dtype_read() {
        let t = Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.data, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_magic_and_shape() {
        assert!(Tensor::<f64>::read_from(&b"NOPE0000"[..]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0f64]).is_err());
    }
}
