//! Mask-guided voxel redistribution: split by the 2D foreground mask,
//! dilate the foreground, max-pool the background, merge.

use rustc_hash::FxHashMap;

use super::{pack_coord, project_to_image, CameraModel, Coord, ForegroundMask, SparseVoxelGrid};
use crate::error::{Error, Result};
use crate::features::FeatureRows;

/// Splits a grid into (foreground, background) by looking up each voxel's
/// projected pixel in the mask. Voxels behind the camera or outside the
/// image are background. Relative row order is preserved.
pub fn partition_fg_bg(
    grid: &SparseVoxelGrid,
    mask: &ForegroundMask,
    cam: &CameraModel,
) -> Result<(SparseVoxelGrid, SparseVoxelGrid)> {
    if !mask.matches_camera(cam) {
        return Err(Error::DimensionMismatch {
            context: "mask width vs camera width",
            expected: cam.width as usize,
            actual: mask.width() as usize,
        });
    }
    let proj = project_to_image(grid, cam);
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (i, p) in proj.iter().enumerate() {
        if p.valid && mask.at(p.u, p.v) {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    Ok((grid.select(&fg), grid.select(&bg)))
}

/// The 27 offsets of a 3×3×3 neighbourhood in lexicographic order.
pub(crate) fn neighbourhood() -> impl Iterator<Item = Coord> {
    (-1..=1).flat_map(|x| (-1..=1).flat_map(move |y| (-1..=1).map(move |z| [x, y, z])))
}

/// 3×3×3 dilation. Existing cells keep their features; a new cell gets the
/// mean of every input voxel whose neighbourhood covers it, accumulated in
/// input row order.
pub fn densify_foreground(grid: &SparseVoxelGrid) -> Result<SparseVoxelGrid> {
    let dim = grid.dim();
    let existing = grid.index();
    let mut fresh: FxHashMap<u64, usize> = FxHashMap::default();
    let mut fresh_coords: Vec<Coord> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();

    for (i, &c) in grid.coords().iter().enumerate() {
        let feat = grid.features().row(i);
        for off in neighbourhood() {
            let n = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
            let key = pack_coord(n)?;
            if existing.contains_key(&key) {
                continue;
            }
            let slot = *fresh.entry(key).or_insert_with(|| {
                fresh_coords.push(n);
                sums.resize(sums.len() + dim, 0.0);
                counts.push(0);
                fresh_coords.len() - 1
            });
            counts[slot] += 1;
            for (s, v) in sums[slot * dim..(slot + 1) * dim].iter_mut().zip(feat) {
                *s += v;
            }
        }
    }

    // (coord, Some(row in input) | None(slot in fresh))
    let mut cells: Vec<(Coord, std::result::Result<usize, usize>)> = grid
        .coords()
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, Ok(i)))
        .chain(fresh_coords.iter().enumerate().map(|(s, &c)| (c, Err(s))))
        .collect();
    cells.sort_unstable_by_key(|(c, _)| *c);

    let mut data = Vec::with_capacity(cells.len() * dim);
    let mut coords = Vec::with_capacity(cells.len());
    for (c, src) in cells {
        coords.push(c);
        match src {
            Ok(i) => data.extend_from_slice(grid.features().row(i)),
            Err(s) => {
                let n = counts[s] as f64;
                data.extend(sums[s * dim..(s + 1) * dim].iter().map(|v| v / n));
            }
        }
    }
    let features = FeatureRows::from_flat(dim, data)?;
    Ok(SparseVoxelGrid::from_parts_unchecked(
        grid.stride(),
        grid.voxel_size(),
        grid.origin(),
        coords,
        features,
    ))
}

/// Max-pooling with kernel = stride = `s` on every axis. Output cells sit
/// on the `s`-times coarser lattice (`floor(c / s)`), recorded as stride
/// `t * s`.
pub fn sparsify_background(grid: &SparseVoxelGrid, s: u32) -> Result<SparseVoxelGrid> {
    if s == 0 {
        return Err(Error::InvalidParameter("pooling factor must be >= 1".into()));
    }
    let stride = grid
        .stride()
        .checked_mul(s)
        .ok_or_else(|| Error::Grid("pooled stride overflows".into()))?;
    let si = s as i32;
    let dim = grid.dim();
    let mut slots: FxHashMap<u64, usize> = FxHashMap::default();
    let mut groups: Vec<Coord> = Vec::new();
    let mut maxima: Vec<f64> = Vec::new();
    for (i, &c) in grid.coords().iter().enumerate() {
        let g = [c[0].div_euclid(si), c[1].div_euclid(si), c[2].div_euclid(si)];
        let feat = grid.features().row(i);
        match slots.get(&pack_coord(g)?) {
            Some(&slot) => {
                for (m, v) in maxima[slot * dim..(slot + 1) * dim].iter_mut().zip(feat) {
                    if *v > *m {
                        *m = *v;
                    }
                }
            }
            None => {
                slots.insert(pack_coord(g)?, groups.len());
                groups.push(g);
                maxima.extend_from_slice(feat);
            }
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_unstable_by_key(|&i| groups[i]);
    let mut data = Vec::with_capacity(groups.len() * dim);
    for &i in &order {
        data.extend_from_slice(&maxima[i * dim..(i + 1) * dim]);
    }
    let features = FeatureRows::from_flat(dim, data)?;
    Ok(SparseVoxelGrid::from_parts_unchecked(
        stride,
        grid.voxel_size(),
        grid.origin(),
        order.iter().map(|&i| groups[i]).collect(),
        features,
    ))
}

/// Overlays a (possibly coarser) background grid onto the foreground
/// lattice. Background cells are rescaled by `bg.stride / fg.stride`;
/// on collision the foreground row is kept.
pub fn merge(fg: &SparseVoxelGrid, bg: &SparseVoxelGrid) -> Result<SparseVoxelGrid> {
    if !fg.same_lattice(bg) {
        return Err(Error::Grid(format!(
            "cannot merge grids on different lattices (voxel size {} vs {}, origin {:?} vs {:?})",
            fg.voxel_size(),
            bg.voxel_size(),
            fg.origin(),
            bg.origin()
        )));
    }
    if bg.stride() % fg.stride() != 0 {
        return Err(Error::Grid(format!(
            "background stride {} is not a multiple of foreground stride {}",
            bg.stride(),
            fg.stride()
        )));
    }
    let dim = match (fg.is_empty(), bg.is_empty()) {
        (false, false) if fg.dim() != bg.dim() => {
            return Err(Error::DimensionMismatch {
                context: "merge feature dimension",
                expected: fg.dim(),
                actual: bg.dim(),
            })
        }
        (true, false) => bg.dim(),
        _ => fg.dim(),
    };
    let scale = (bg.stride() / fg.stride()) as i32;

    let taken = fg.index();
    let mut cells: Vec<(Coord, &[f64])> = fg
        .coords()
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, fg.features().row(i)))
        .collect();
    for (i, &c) in bg.coords().iter().enumerate() {
        let r = [c[0] * scale, c[1] * scale, c[2] * scale];
        if !taken.contains_key(&pack_coord(r)?) {
            cells.push((r, bg.features().row(i)));
        }
    }
    cells.sort_unstable_by_key(|(c, _)| *c);
    // a background grid may itself repeat a cell only if it was malformed
    if cells.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Grid("merge produced duplicate cells".into()));
    }
    let mut data = Vec::with_capacity(cells.len() * dim);
    let mut coords = Vec::with_capacity(cells.len());
    for (c, row) in cells {
        coords.push(c);
        data.extend_from_slice(row);
    }
    let features = FeatureRows::from_flat(dim, data)?;
    Ok(SparseVoxelGrid::from_parts_unchecked(
        fg.stride(),
        fg.voxel_size(),
        fg.origin(),
        coords,
        features,
    ))
}

#[derive(Debug, Clone)]
pub struct SgvoOutput {
    pub foreground: SparseVoxelGrid,
    pub background: SparseVoxelGrid,
    pub densified: SparseVoxelGrid,
    pub sparsified: SparseVoxelGrid,
    pub merged: SparseVoxelGrid,
}

/// partition → densify foreground → pool background by `s` → merge.
pub fn run_sgvo(
    grid: &SparseVoxelGrid,
    mask: &ForegroundMask,
    cam: &CameraModel,
    s: u32,
) -> Result<SgvoOutput> {
    let (foreground, background) = partition_fg_bg(grid, mask, cam)?;
    let densified = densify_foreground(&foreground)?;
    let sparsified = sparsify_background(&background, s)?;
    let merged = merge(&densified, &sparsified)?;
    Ok(SgvoOutput {
        foreground,
        background,
        densified,
        sparsified,
        merged,
    })
}
