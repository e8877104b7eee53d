//! Binary cache for solved grids.
//!
//! Layout, all little-endian:
//!
//! | offset | size        | content                                   |
//! |--------|-------------|-------------------------------------------|
//! | 0      | 8           | magic `IONGRID\0`                         |
//! | 8      | 4           | format version, `u32` (currently 1)       |
//! | 12     | 32          | SHA-256 key, see [`cache_key`]            |
//! | 44     | 24          | `nx`, `ny`, `nz` as `u64`                 |
//! | 68     | 24          | origin x, y, z as `f64` (m)               |
//! | 92     | 8           | spacing as `f64` (m)                      |
//! | 100    | 8·nx·ny·nz  | potential as `f64` (V), `z` fastest       |
//!
//! The Dirichlet mask is not stored; it is rebuilt from the assembly.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::PotentialGrid;
use crate::error::{Error, Result};
use crate::geometry::Assembly;
use crate::Vec3;

pub const MAGIC: &[u8; 8] = b"IONGRID\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 100;

/// SHA-256 over the assembly's JSON form followed by the spacing and the
/// tolerance as little-endian `f64`.
pub fn cache_key(assembly: &Assembly, spacing: f64, tol: f64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(assembly).expect("assembly serializes"));
    h.update(spacing.to_le_bytes());
    h.update(tol.to_le_bytes());
    h.finalize().into()
}

pub fn write_grid(path: &Path, key: &[u8; 32], grid: &PotentialGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * grid.phi.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(key);
    for n in grid.dims {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for d in 0..3 {
        buf.extend_from_slice(&grid.origin[d].to_le_bytes());
    }
    buf.extend_from_slice(&grid.spacing.to_le_bytes());
    for v in &grid.phi {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // Write to a sibling file first so a reader never sees a partial grid.
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<const N: usize>(bytes: &[u8], at: &mut usize) -> [u8; N] {
    let mut out = [0u8; N];
    out.copy_from_slice(&bytes[*at..*at + N]);
    *at += N;
    out
}

/// Reads a grid written by [`write_grid`]; the key must match and the mask
/// and stray field come from `assembly`.
pub fn read_grid(path: &Path, key: &[u8; 32], assembly: &Assembly) -> Result<PotentialGrid> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Cache(format!("{} is not a grid cache file", path.display())));
    }
    let mut at = 8;
    let version = u32::from_le_bytes(take(&bytes, &mut at));
    if version != VERSION {
        return Err(Error::Cache(format!("unsupported cache version {version}")));
    }
    let stored: [u8; 32] = take(&bytes, &mut at);
    if &stored != key {
        return Err(Error::Cache("cache key mismatch".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u64::from_le_bytes(take(&bytes, &mut at)) as usize;
    }
    let mut origin = Vec3::zeros();
    for d in 0..3 {
        origin[d] = f64::from_le_bytes(take(&bytes, &mut at));
    }
    let spacing = f64::from_le_bytes(take(&bytes, &mut at));
    let count = dims[0] * dims[1] * dims[2];
    if bytes.len() != HEADER_LEN + 8 * count {
        return Err(Error::Cache(format!("{} is truncated", path.display())));
    }
    let phi = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let template = PotentialGrid::from_assembly(assembly, spacing)?;
    if template.dims != dims || template.origin != origin {
        return Err(Error::Cache("cached grid does not match the assembly".into()));
    }
    Ok(PotentialGrid { phi, ..template })
}
