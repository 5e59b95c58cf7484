//! Raw tensor container used for masks, guidance maps, features and scores.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GSTEN" | version: u8 | dtype: u8 (0 = u8, 1 = f32) | ndim: u8 | dims: u32 * ndim | payload
//! ```
//!
//! The payload is row-major with no padding.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{format_error, Error, Result};

pub const MAGIC: &[u8; 5] = b"GSTEN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl TensorData {
    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::U8(_) => 0,
            TensorData::F32(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    /// Narrows `f64` values to the on-disk `f32` representation.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::f32(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(format_error!("tensor rank {} exceeds 255", dims.len()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(format_error!(
                "tensor dims {:?} imply {} elements, payload has {}",
                dims,
                expected,
                data.len()
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(format_error!("expected u8 tensor, found f32")),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(format_error!("expected f32 tensor, found u8")),
        }
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        Ok(self.as_f32()?.iter().map(|&v| v as f64).collect())
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.dims.len() != rank {
            return Err(format_error!(
                "expected rank-{} tensor, found dims {:?}",
                rank,
                self.dims
            ));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.data.dtype_code(), self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &self.data {
            TensorData::U8(v) => w.write_all(v)?,
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)
            .map_err(|_| format_error!("truncated tensor header"))?;
        if &head[..5] != MAGIC {
            return Err(format_error!("bad tensor magic {:?}", &head[..5]));
        }
        let (version, dtype, ndim) = (head[5], head[6], head[7] as usize);
        if version != VERSION {
            return Err(format_error!("unsupported tensor version {}", version));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| format_error!("truncated tensor dims"))?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let numel: usize = dims.iter().product();
        let data = match dtype {
            0 => {
                let mut v = vec![0u8; numel];
                r.read_exact(&mut v)
                    .map_err(|_| format_error!("truncated u8 payload, expected {} bytes", numel))?;
                TensorData::U8(v)
            }
            1 => {
                let mut raw = vec![0u8; numel * 4];
                r.read_exact(&mut raw).map_err(|_| {
                    format_error!("truncated f32 payload, expected {} bytes", numel * 4)
                })?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            other => return Err(format_error!("unknown tensor dtype code {}", other)),
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).unwrap_or(0) != 0 {
            return Err(format_error!("trailing bytes after tensor payload"));
        }
        Tensor::new(dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }
}
