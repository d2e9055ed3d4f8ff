//! Flat binary tensor files: `CCTENSOR`, a little-endian u64 header length,
//! a JSON header, then the row-major little-endian f64 payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CCTENSOR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub schema_version: String,
    /// Free-form description of the axes.
    #[serde(default)]
    pub layout: String,
}

impl TensorHeader {
    pub fn f64(shape: Vec<usize>, schema_version: &str, layout: &str) -> Self {
        TensorHeader {
            shape,
            dtype: "f64".into(),
            schema_version: schema_version.into(),
            layout: layout.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write_tensor<W: Write>(mut w: W, header: &TensorHeader, data: &[f64]) -> Result<()> {
    if header.len() != data.len() || header.dtype != "f64" {
        return Err(Error::Shape {
            expected: header.len(),
            actual: data.len(),
            context: "tensor payload",
        });
    }
    let io = |e| Error::io("<tensor>", e);
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<(TensorHeader, Vec<f64>)> {
    let io = |e| Error::io("<tensor>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a tensor file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: TensorHeader = serde_json::from_slice(&json)?;
    if header.dtype != "f64" {
        return Err(Error::Config(format!("unsupported dtype {}", header.dtype)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != header.len() * 8 {
        return Err(Error::Shape {
            expected: header.len() * 8,
            actual: bytes.len(),
            context: "tensor payload bytes",
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, data))
}
