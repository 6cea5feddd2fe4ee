//! Grid serialization: JSON, the `HVGX` binary payload and ASCII PLY.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! b"HVGX" | u32 version = 1 | u32 count | u32 dim
//! count × (i32, i32, i32)   coordinates
//! count × dim × f64         features
//! ```
//!
//! The binary file carries no lattice metadata; it is a sibling of the
//! JSON file, which does.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Coord, SparseVoxelGrid};
use crate::error::{Error, Result};
use crate::features::FeatureRows;

pub const BINARY_MAGIC: &[u8; 4] = b"HVGX";
pub const BINARY_VERSION: u32 = 1;

pub fn write_json(grid: &SparseVoxelGrid, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, grid)?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<SparseVoxelGrid> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

pub fn write_binary<W: Write>(grid: &SparseVoxelGrid, mut w: W) -> Result<()> {
    let count = u32::try_from(grid.len()).map_err(|_| Error::Format("too many voxels".into()))?;
    let dim = u32::try_from(grid.dim()).map_err(|_| Error::Format("feature dim too large".into()))?;
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    for c in grid.coords() {
        for v in c {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in grid.features().as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a binary payload and attaches it to the given lattice.
pub fn read_binary<R: Read>(
    mut r: R,
    stride: u32,
    voxel_size: f64,
    origin: [f64; 3],
) -> Result<SparseVoxelGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let mut coords: Vec<Coord> = Vec::with_capacity(count);
    let mut b4 = [0u8; 4];
    for _ in 0..count {
        let mut c = [0i32; 3];
        for v in &mut c {
            r.read_exact(&mut b4)?;
            *v = i32::from_le_bytes(b4);
        }
        coords.push(c);
    }
    let mut data = Vec::with_capacity(count * dim);
    let mut b8 = [0u8; 8];
    for _ in 0..count * dim {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    let features = FeatureRows::from_flat(dim, data)?;
    SparseVoxelGrid::new(stride, voxel_size, origin, coords, features)
}

/// ASCII PLY of voxel centers with one scalar per vertex.
pub fn write_ply<W: Write>(grid: &SparseVoxelGrid, scores: &[f64], mut w: W) -> Result<()> {
    if scores.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            context: "ply scores",
            expected: grid.len(),
            actual: scores.len(),
        });
    }
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", grid.len())?;
    for p in ["x", "y", "z", "score"] {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "end_header")?;
    for (i, s) in scores.iter().enumerate() {
        let c = grid.center(i);
        writeln!(w, "{} {} {} {}", c[0], c[1], c[2], s)?;
    }
    w.flush()?;
    Ok(())
}
