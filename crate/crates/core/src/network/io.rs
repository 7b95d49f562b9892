//! Model files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PNET"
//! 4       4     format version, u32 LE (currently 1)
//! 8       4     precision, u32 LE: 0 = 32-bit floats, 1 = 64-bit floats
//! 12      4     manifest length in bytes, u32 LE
//! 16      m     canonical manifest, UTF-8
//! 16+m    ...   parameter tensors in manifest order, little-endian floats,
//!               NCHW row-major, no padding and nothing after the last one
//! ```

use std::path::Path;

use super::config::NetworkConfig;
use super::model::{parameter_layout, Model};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNET";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

fn precision_code(p: Precision) -> u32 {
    match p {
        Precision::Single => 0,
        Precision::Double => 1,
    }
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| fmt_err(bytes.len(), format!("file ends inside the {what} field")))
}

/// Precision recorded in a model file header.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic, not a model file"));
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != VERSION {
        return Err(fmt_err(4, format!("unsupported format version {version}")));
    }
    match read_u32(bytes, 8, "precision")? {
        0 => Ok(Precision::Single),
        1 => Ok(Precision::Double),
        other => Err(fmt_err(8, format!("unknown precision code {other}"))),
    }
}

pub fn peek_precision_file(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    peek_precision(&bytes)
}

impl<T: Scalar> Model<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.config.manifest();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + self.parameter_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&precision_code(T::PRECISION).to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in self.parameters() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let precision = peek_precision(bytes)?;
        if precision != T::PRECISION {
            return Err(fmt_err(
                8,
                format!(
                    "file holds {} precision, requested {}",
                    precision.name(),
                    T::PRECISION.name()
                ),
            ));
        }
        let mlen = read_u32(bytes, 12, "manifest length")? as usize;
        let mbytes = bytes
            .get(HEADER_LEN..HEADER_LEN + mlen)
            .ok_or_else(|| fmt_err(bytes.len(), "file ends inside the manifest"))?;
        let text = std::str::from_utf8(mbytes).map_err(|e| fmt_err(HEADER_LEN + e.valid_up_to(), "manifest is not UTF-8"))?;
        let config = NetworkConfig::from_manifest(text).map_err(|e| fmt_err(HEADER_LEN, e.to_string()))?;
        let topo = config.validate()?;
        let width = T::PRECISION.byte_width();
        let mut at = HEADER_LEN + mlen;
        let mut tensors = Vec::new();
        for (name, shape) in parameter_layout(&config, &topo) {
            let len = shape.numel() * width;
            let chunk = bytes.get(at..at + len).ok_or_else(|| {
                fmt_err(
                    bytes.len(),
                    format!("truncated inside tensor {name} (starts at byte {at}, needs {len} bytes)"),
                )
            })?;
            let data = chunk.chunks_exact(width).map(T::read_le).collect();
            tensors.push(Tensor::from_vec(shape, data)?);
            at += len;
        }
        if at != bytes.len() {
            return Err(fmt_err(at, format!("{} unexpected trailing bytes", bytes.len() - at)));
        }
        Model::from_parameters(config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
