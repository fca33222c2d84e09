//! `NSF1` feature matrices.
//!
//! Little-endian layout: magic `NSF1` | u32 rows | u32 cols | rows·cols f32
//! values in row-major order.

use std::fs;
use std::path::Path;

use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::numerics::Array;

pub const NSF_MAGIC: &[u8; 4] = b"NSF1";
const HEADER_LEN: usize = 12;

pub fn encode_matrix(matrix: &Array) -> Result<Vec<u8>> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    if matrix.rank() != 2 {
        return Err(Error::contract(format!(
            "feature files hold matrices, got shape {:?}",
            matrix.shape()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * matrix.len());
    buf.extend_from_slice(NSF_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in matrix.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_matrix(path: &Path, bytes: &[u8]) -> Result<Array> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!(
                "truncated header: expected at least {HEADER_LEN}, got {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[..4] != NSF_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, format!("empty matrix {rows}x{cols}")));
    }
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("length mismatch: expected {expected}, got {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array::new(vec![rows, cols], data)
}

pub fn write_feature_file(path: &Path, matrix: &Array) -> Result<()> {
    atomic_write(path, &encode_matrix(matrix)?)
}

pub fn read_feature_file(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(path, &bytes)
}
