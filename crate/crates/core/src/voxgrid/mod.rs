//! Sparse voxel grids and the mask-guided redistribution pipeline.
//!
//! A grid is a set of distinct integer cells on a lattice of pitch
//! `voxel_size * stride`, each carrying a feature row. All operations in
//! this module emit cells in lexicographic coordinate order.

mod camera;
pub mod io;
mod sgvo;

use rustc_hash::FxHashMap;

use serde::{Deserialize, Serialize};

pub use camera::{project_point, project_to_image, CameraModel, ForegroundMask, Projection, MIN_DEPTH};
pub use sgvo::{
    densify_foreground, merge, partition_fg_bg, run_sgvo, sparsify_background, SgvoOutput,
};

use crate::error::{Error, Result};
use crate::features::FeatureRows;

pub type Coord = [i32; 3];

/// Coordinates must lie in `[-COORD_LIMIT, COORD_LIMIT)` on every axis.
pub const COORD_LIMIT: i32 = 1 << 20;

/// Packs an in-range coordinate into 63 bits (21 per axis). Injective on
/// the valid range, so it doubles as an exact hash key.
pub fn pack_coord(c: Coord) -> Result<u64> {
    let mut key = 0u64;
    for (axis, &v) in c.iter().enumerate() {
        if !(-COORD_LIMIT..COORD_LIMIT).contains(&v) {
            return Err(Error::Grid(format!(
                "coordinate {c:?} outside [-2^20, 2^20) on axis {axis}"
            )));
        }
        key = (key << 21) | (v + COORD_LIMIT) as u64;
    }
    Ok(key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridFile", into = "GridFile")]
pub struct SparseVoxelGrid {
    stride: u32,
    voxel_size: f64,
    origin: [f64; 3],
    coords: Vec<Coord>,
    features: FeatureRows,
}

/// On-disk JSON layout.
#[derive(Serialize, Deserialize)]
struct GridFile {
    stride: u32,
    voxel_size: f64,
    origin: [f64; 3],
    coords: Vec<Coord>,
    features: Vec<Vec<f64>>,
}

impl TryFrom<GridFile> for SparseVoxelGrid {
    type Error = Error;

    fn try_from(f: GridFile) -> Result<Self> {
        let features = FeatureRows::from_rows(&f.features)?;
        SparseVoxelGrid::new(f.stride, f.voxel_size, f.origin, f.coords, features)
    }
}

impl From<SparseVoxelGrid> for GridFile {
    fn from(g: SparseVoxelGrid) -> Self {
        GridFile {
            stride: g.stride,
            voxel_size: g.voxel_size,
            origin: g.origin,
            features: g.features.to_rows(),
            coords: g.coords,
        }
    }
}

fn check_lattice(stride: u32, voxel_size: f64, origin: [f64; 3]) -> Result<()> {
    if stride == 0 {
        return Err(Error::Grid("stride must be positive".into()));
    }
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::Grid(format!(
            "voxel size must be finite and > 0, got {voxel_size}"
        )));
    }
    if origin.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("grid origin"));
    }
    Ok(())
}

impl SparseVoxelGrid {
    pub fn new(
        stride: u32,
        voxel_size: f64,
        origin: [f64; 3],
        coords: Vec<Coord>,
        features: FeatureRows,
    ) -> Result<Self> {
        check_lattice(stride, voxel_size, origin)?;
        if coords.len() != features.len() {
            return Err(Error::DimensionMismatch {
                context: "grid coords vs features",
                expected: coords.len(),
                actual: features.len(),
            });
        }
        let mut seen = FxHashMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (i, &c) in coords.iter().enumerate() {
            if let Some(j) = seen.insert(pack_coord(c)?, i) {
                return Err(Error::Grid(format!(
                    "duplicate coordinate {c:?} at rows {j} and {i}"
                )));
            }
        }
        if !features.all_finite() {
            return Err(Error::non_finite("grid features"));
        }
        Ok(Self {
            stride,
            voxel_size,
            origin,
            coords,
            features,
        })
    }

    pub fn empty(stride: u32, voxel_size: f64, origin: [f64; 3], dim: usize) -> Result<Self> {
        check_lattice(stride, voxel_size, origin)?;
        Ok(Self {
            stride,
            voxel_size,
            origin,
            coords: Vec::new(),
            features: FeatureRows::new(dim),
        })
    }

    /// Internal constructor for outputs whose invariants hold by construction.
    pub(crate) fn from_parts_unchecked(
        stride: u32,
        voxel_size: f64,
        origin: [f64; 3],
        coords: Vec<Coord>,
        features: FeatureRows,
    ) -> Self {
        debug_assert_eq!(coords.len(), features.len());
        Self {
            stride,
            voxel_size,
            origin,
            coords,
            features,
        }
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &FeatureRows {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Edge length of one cell in meters.
    pub fn cell_pitch(&self) -> f64 {
        self.voxel_size * self.stride as f64
    }

    pub fn center_of(&self, c: Coord) -> [f64; 3] {
        let pitch = self.cell_pitch();
        [
            self.origin[0] + (c[0] as f64 + 0.5) * pitch,
            self.origin[1] + (c[1] as f64 + 0.5) * pitch,
            self.origin[2] + (c[2] as f64 + 0.5) * pitch,
        ]
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        self.center_of(self.coords[i])
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.coords.iter().map(|&c| self.center_of(c)).collect()
    }

    pub fn same_lattice(&self, other: &Self) -> bool {
        self.voxel_size == other.voxel_size && self.origin == other.origin
    }

    pub fn is_sorted(&self) -> bool {
        self.coords.windows(2).all(|w| w[0] < w[1])
    }

    /// Same cells re-ordered lexicographically.
    pub fn sorted(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_unstable_by_key(|&i| self.coords[i]);
        self.select(&order)
    }

    /// Sub-grid of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self::from_parts_unchecked(
            self.stride,
            self.voxel_size,
            self.origin,
            indices.iter().map(|&i| self.coords[i]).collect(),
            self.features.select(indices),
        )
    }

    /// Same cells with a new feature table.
    pub fn with_features(&self, features: FeatureRows) -> Result<Self> {
        if features.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "replacement features",
                expected: self.len(),
                actual: features.len(),
            });
        }
        if !features.all_finite() {
            return Err(Error::non_finite("grid features"));
        }
        Ok(Self {
            features,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Self {
        Self {
            stride: self.stride,
            voxel_size: self.voxel_size,
            origin: self.origin,
            coords: self.coords.clone(),
            features: FeatureRows::new(self.dim()),
        }
    }

    /// Map from packed coordinate to row index.
    pub fn index(&self) -> FxHashMap<u64, usize> {
        self.coords
            .iter()
            .enumerate()
            .map(|(i, &c)| (pack_coord(c).expect("validated coordinate"), i))
            .collect()
    }

    pub fn find(&self, c: Coord) -> Option<usize> {
        self.coords.iter().position(|&x| x == c)
    }
}

/// Voxelization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelParams {
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub stride: u32,
    /// Feature width used for the occupancy count when points carry no
    /// features.
    pub occupancy_dim: usize,
}

impl VoxelParams {
    pub fn new(voxel_size: f64, origin: [f64; 3], stride: u32) -> Self {
        Self {
            voxel_size,
            origin,
            stride,
            occupancy_dim: 1,
        }
    }
}

/// Cell index of a point on a lattice of the given pitch.
pub fn cell_of(p: [f64; 3], origin: [f64; 3], pitch: f64) -> Result<Coord> {
    let mut c = [0i32; 3];
    for a in 0..3 {
        let f = ((p[a] - origin[a]) / pitch).floor();
        if !(f >= -(COORD_LIMIT as f64) && f < COORD_LIMIT as f64) {
            return Err(Error::Grid(format!(
                "point {p:?} falls outside the addressable lattice"
            )));
        }
        c[a] = f as i32;
    }
    Ok(c)
}

/// Bins points into cells. With features, each cell carries the mean of
/// its members' rows (summed in point order); without, the member count
/// broadcast to `occupancy_dim`.
pub fn voxelize(
    points: &[[f64; 3]],
    features: Option<&FeatureRows>,
    params: &VoxelParams,
) -> Result<SparseVoxelGrid> {
    check_lattice(params.stride, params.voxel_size, params.origin)?;
    if let Some(f) = features {
        if f.len() != points.len() {
            return Err(Error::DimensionMismatch {
                context: "point features",
                expected: points.len(),
                actual: f.len(),
            });
        }
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("point coordinates"));
    }
    let dim = features.map_or(params.occupancy_dim, FeatureRows::dim);
    let pitch = params.voxel_size * params.stride as f64;

    let mut slots: FxHashMap<u64, usize> = FxHashMap::default();
    let mut cells: Vec<Coord> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (pi, &p) in points.iter().enumerate() {
        let c = cell_of(p, params.origin, pitch)?;
        let slot = *slots.entry(pack_coord(c)?).or_insert_with(|| {
            cells.push(c);
            sums.resize(sums.len() + dim, 0.0);
            counts.push(0);
            cells.len() - 1
        });
        counts[slot] += 1;
        if let Some(f) = features {
            for (s, v) in sums[slot * dim..(slot + 1) * dim].iter_mut().zip(f.row(pi)) {
                *s += v;
            }
        }
    }

    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_unstable_by_key(|&i| cells[i]);
    let mut data = Vec::with_capacity(cells.len() * dim);
    for &i in &order {
        if features.is_some() {
            let n = counts[i] as f64;
            data.extend(sums[i * dim..(i + 1) * dim].iter().map(|s| s / n));
        } else {
            data.extend(std::iter::repeat_n(counts[i] as f64, dim));
        }
    }
    let out = FeatureRows::from_flat(dim, data)?;
    Ok(SparseVoxelGrid::from_parts_unchecked(
        params.stride,
        params.voxel_size,
        params.origin,
        order.iter().map(|&i| cells[i]).collect(),
        out,
    ))
}
