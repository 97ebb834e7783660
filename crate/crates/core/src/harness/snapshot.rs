//! Binary density snapshots.
//!
//! Layout, all little-endian:
//!
//! | bytes | content                               |
//! |-------|---------------------------------------|
//! | 8     | magic `SHPDENS\0`                     |
//! | 4     | format version (`u32`, currently 1)   |
//! | 16    | `n_x1, n_x2, n_v1, n_v2` (`u32` each) |
//! | 16    | half spatial length, velocity bound   |
//! | 8     | time (`f64`)                          |
//! | 8·n   | cell values (`f64`), `(x1, x2, v1, v2)` row-major |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::meanfield::{DensityField, PhaseGrid};

pub const MAGIC: [u8; 8] = *b"SHPDENS\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 16 + 16 + 8;

pub fn write_snapshot(path: &Path, grid: &PhaseGrid, values: &[f64], time: f64) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::shape("snapshot payload does not match the grid"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for n in grid.n_x.iter().chain(&grid.n_v) {
        let n = u32::try_from(*n).map_err(|_| Error::shape("grid too large for snapshot"))?;
        w.write_all(&n.to_le_bytes())?;
    }
    w.write_all(&grid.half_length.to_le_bytes())?;
    w.write_all(&grid.v_max.to_le_bytes())?;
    w.write_all(&time.to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(DensityField, f64)> {
    let bad = |msg: &str| Error::Snapshot {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if header[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let counts: Vec<usize> = (0..4).map(|k| u32_at(12 + 4 * k) as usize).collect();
    let grid = PhaseGrid::new(f64_at(28), f64_at(36), [counts[0], counts[1]], [counts[2], counts[3]])
        .map_err(|e| bad(&e.to_string()))?;
    let time = f64_at(44);
    let mut bytes = Vec::with_capacity(grid.len() * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != grid.len() * 8 {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            grid.len() * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((DensityField { grid, values }, time))
}
