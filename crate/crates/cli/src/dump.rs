//! Sample dumps: a 32-byte header followed by a row-major little-endian
//! `f64` matrix.
//!
//! | bytes  | field                     |
//! |--------|---------------------------|
//! | 0..8   | magic `NFSAMPLE`          |
//! | 8..12  | version (`u32`, = 1)      |
//! | 12..16 | reserved (`u32`, = 0)     |
//! | 16..24 | rows (`u64`)              |
//! | 24..32 | cols (`u64`)              |

use std::path::Path;

use flowpath_core::matrix::Matrix;

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"NFSAMPLE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DumpError {
    #[error("not a sample dump (bad magic)")]
    BadMagic,
    #[error("unsupported sample dump version {0}")]
    Version(u32),
    #[error("sample dump truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("sample dump has {0} trailing bytes")]
    Trailing(usize),
}

pub fn encode(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Matrix, DumpError> {
    if bytes.len() < HEADER_LEN {
        return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            DumpError::BadMagic
        } else {
            DumpError::Truncated { expected: HEADER_LEN, found: bytes.len() }
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(DumpError::BadMagic);
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(DumpError::Version(version));
    }
    let (rows, cols) = (u64_at(16) as usize, u64_at(24) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(DumpError::Truncated { expected: usize::MAX, found: bytes.len() })?;
    if bytes.len() < expected {
        return Err(DumpError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DumpError::Trailing(bytes.len() - expected));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write(path: &Path, m: &Matrix) -> Result<(), CliError> {
    std::fs::write(path, encode(m)).map_err(CliError::io(path.display()))
}

pub fn read(path: &Path) -> Result<Matrix, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::read(path))?;
    decode(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
