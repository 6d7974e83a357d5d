//! CVXG grid files.
//!
//! ```text
//! CVXG 1\n
//! X Y Z\n
//! X*Y*Z little-endian f32 values, last axis fastest
//! ```
//!
//! Masks use the same layout with `Z = 1`. Values are stored as `f32`, so a
//! round trip is exact for any grid whose values are `f32`-representable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RealGrid;

pub const MAGIC: &str = "CVXG 1";
pub const MAX_EXTENT: usize = 512;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn check_dims(dims: &[usize]) -> Result<[usize; 3]> {
    let d: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::invalid(format!("CVXG grids are 3D, got {} axes", dims.len())))?;
    if d.iter().any(|&e| e == 0 || e > MAX_EXTENT) {
        return Err(Error::invalid(format!(
            "CVXG extents must be in 1..={MAX_EXTENT}, got {d:?}"
        )));
    }
    Ok(d)
}

pub fn encode(grid: &RealGrid) -> Result<Vec<u8>> {
    let [x, y, z] = check_dims(grid.dims())?;
    let header = format!("{MAGIC}\n{x} {y} {z}\n");
    let mut out = Vec::with_capacity(header.len() + 4 * grid.len());
    out.extend_from_slice(header.as_bytes());
    for &v in grid.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<RealGrid> {
    let magic_end = MAGIC.len();
    if bytes.len() < magic_end + 1 || &bytes[..magic_end] != MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
        let bad = bytes
            .iter()
            .zip(MAGIC.as_bytes().iter().chain(b"\n"))
            .position(|(a, b)| a != b)
            .unwrap_or(bytes.len());
        return Err(format_err(bad, format!("expected magic {MAGIC:?}")));
    }
    let dims_start = magic_end + 1;
    let line_len = bytes[dims_start..]
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(dims_start, "missing extents line"))?;
    let line = std::str::from_utf8(&bytes[dims_start..dims_start + line_len])
        .map_err(|_| format_err(dims_start, "extents line is not ASCII"))?;
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 3 {
        return Err(format_err(dims_start, format!("expected \"X Y Z\", found {line:?}")));
    }
    let mut dims = [0usize; 3];
    let mut offset = dims_start;
    for (slot, field) in dims.iter_mut().zip(&fields) {
        if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format_err(offset, format!("bad extent {field:?}")));
        }
        *slot = field
            .parse()
            .ok()
            .filter(|&e| (1..=MAX_EXTENT).contains(&e))
            .ok_or_else(|| format_err(offset, format!("extent {field} outside 1..={MAX_EXTENT}")))?;
        offset += field.len() + 1;
    }
    let payload_start = dims_start + line_len + 1;
    let expected = 4 * dims.iter().product::<usize>();
    let actual = bytes.len() - payload_start;
    if actual != expected {
        return Err(format_err(
            payload_start + actual.min(expected),
            format!("expected {expected} payload bytes, found {actual}"),
        ));
    }
    let values = bytes[payload_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    RealGrid::new(dims.to_vec(), values)
}

pub fn write_voxel_grid(path: impl AsRef<Path>, grid: &RealGrid) -> Result<()> {
    fs::write(path, encode(grid)?)?;
    Ok(())
}

pub fn read_voxel_grid(path: impl AsRef<Path>) -> Result<RealGrid> {
    decode(&fs::read(path)?)
}
