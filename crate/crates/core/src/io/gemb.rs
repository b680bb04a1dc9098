//! GEMB embedding container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GEMB"
//! 4       4     version (u32 LE) = 1
//! 8       8     rows (u64 LE)
//! 16      8     dims (u64 LE)
//! 24      4·r·d payload, f32 LE, row-major
//! end-4   4     CRC-32 (IEEE) of the payload bytes, u32 LE
//! ```

use std::path::{Path, PathBuf};

use super::{atomic_write, Manifest};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const GEMB_MAGIC: [u8; 4] = *b"GEMB";
pub const GEMB_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Raw `f32` contents of a GEMB file.
#[derive(Debug, Clone, PartialEq)]
pub struct GembPayload {
    pub rows: usize,
    pub dims: usize,
    pub values: Vec<f32>,
}

impl GembPayload {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            dims: m.cols(),
            values: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::new(
            self.rows,
            self.dims,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len() + 4);
        out.extend_from_slice(&GEMB_MAGIC);
        out.extend_from_slice(&GEMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dims as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let path_buf = || PathBuf::from(path);
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::Truncated {
                path: path_buf(),
                expected: (HEADER_LEN + 4) as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != GEMB_MAGIC {
            return Err(Error::BadMagic {
                path: path_buf(),
                expected: GEMB_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != GEMB_VERSION {
            return Err(Error::VersionMismatch {
                path: path_buf(),
                expected: GEMB_VERSION,
                found: version,
            });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dims = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let payload_len = rows
            .checked_mul(dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::data(format!("{}: header size overflow", path.display())))?;
        let expected = HEADER_LEN as u64 + payload_len + 4;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                path: path_buf(),
                expected,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 > expected {
            return Err(Error::data(format!(
                "{}: {} trailing bytes after checksum",
                path.display(),
                bytes.len() as u64 - expected
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len as usize];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum {
                path: path_buf(),
                stored,
                computed,
            });
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "{}: non-finite value at row {}",
                path.display(),
                pos / (dims as usize).max(1)
            )));
        }
        Ok(Self {
            rows: rows as usize,
            dims: dims as usize,
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub fn write_gemb(path: &Path, m: &Matrix) -> Result<()> {
    atomic_write(path, &GembPayload::from_matrix(m).encode())
}

pub fn read_gemb(path: &Path) -> Result<Matrix> {
    GembPayload::read(path)?.to_matrix()
}

/// Companion manifest path: same stem, `.json` extension.
pub fn manifest_path(gemb_path: &Path) -> PathBuf {
    gemb_path.with_extension("json")
}

/// Reads a GEMB file and its manifest, cross-checking counts.
pub fn read_embeddings(path: &Path) -> Result<(Matrix, Manifest)> {
    let matrix = read_gemb(path)?;
    let manifest = Manifest::read(&manifest_path(path))?;
    manifest.check_matches(matrix.rows(), matrix.cols())?;
    Ok((matrix, manifest))
}

pub fn write_embeddings(path: &Path, m: &Matrix, manifest: &Manifest) -> Result<()> {
    manifest.check_matches(m.rows(), m.cols())?;
    write_gemb(path, m)?;
    manifest.write(&manifest_path(path))
}
