use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SparseVoxelGrid;
use crate::error::{Error, Result};

/// Points closer to the image plane than this are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera with rigid world-to-camera extrinsics
/// (`p_cam = R p_world + t`; +z forward, +x right, +y down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
    w: u32,
    h: u32,
}

impl TryFrom<CameraFile> for CameraModel {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Self> {
        CameraModel::new(f.fx, f.fy, f.cx, f.cy, f.r, f.t, f.w, f.h)
    }
}

impl From<CameraModel> for CameraFile {
    fn from(c: CameraModel) -> Self {
        CameraFile {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            r: c.rotation,
            t: c.translation,
            w: c.width,
            h: c.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if ![cx, cy].iter().chain(rotation.iter().flatten()).chain(&translation).all(|v| v.is_finite()) {
            return Err(Error::non_finite("camera parameters"));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image size must be positive".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                if (rtr - id).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {rtr})"
                    )));
                }
            }
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    pub fn to_camera_frame(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

pub fn project_point(cam: &CameraModel, p: [f64; 3]) -> Projection {
    let q = cam.to_camera_frame(p);
    if q[2] <= MIN_DEPTH {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth: q[2],
            valid: false,
        };
    }
    let u = cam.fx * q[0] / q[2] + cam.cx;
    let v = cam.fy * q[1] / q[2] + cam.cy;
    Projection {
        u,
        v,
        depth: q[2],
        valid: cam.in_image(u, v),
    }
}

/// Projects every voxel center; output row `i` belongs to grid row `i`.
pub fn project_to_image(grid: &SparseVoxelGrid, cam: &CameraModel) -> Vec<Projection> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| project_point(cam, grid.center(i)))
        .collect()
}

/// Binary image raster, row-major, `true` = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn ones(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch {
                context: "mask bits",
                expected: width as usize * height as usize,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        if x < self.width && y < self.height {
            self.bits[(y * self.width + x) as usize] = value;
        }
    }

    /// Foreground test at a continuous pixel position (floor lookup).
    pub fn at(&self, u: f64, v: f64) -> bool {
        if !(u >= 0.0 && v >= 0.0) {
            return false;
        }
        let (x, y) = (u.floor(), v.floor());
        if x >= self.width as f64 || y >= self.height as f64 {
            return false;
        }
        self.get(x as u32, y as u32)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// `E - M`.
    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn matches_camera(&self, cam: &CameraModel) -> bool {
        self.width == cam.width && self.height == cam.height
    }

    /// Run lengths per row, alternating background/foreground and always
    /// starting with a (possibly zero) background run.
    pub fn to_rle_rows(&self) -> Vec<Vec<u32>> {
        self.bits
            .chunks(self.width.max(1) as usize)
            .take(self.height as usize)
            .map(|row| {
                let mut runs = Vec::new();
                let mut current = false;
                let mut len = 0u32;
                for &b in row {
                    if b == current {
                        len += 1;
                    } else {
                        runs.push(len);
                        current = b;
                        len = 1;
                    }
                }
                runs.push(len);
                runs
            })
            .collect()
    }

    pub fn from_rle_rows(width: u32, height: u32, rows: &[Vec<u32>]) -> Result<Self> {
        if rows.len() != height as usize {
            return Err(Error::Format(format!(
                "mask has {} rows, expected {height}",
                rows.len()
            )));
        }
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for (y, runs) in rows.iter().enumerate() {
            let mut value = false;
            let mut total = 0u64;
            for &r in runs {
                total += r as u64;
                bits.extend(std::iter::repeat_n(value, r as usize));
                value = !value;
            }
            if total != width as u64 {
                return Err(Error::Format(format!(
                    "mask row {y} decodes to {total} pixels, expected {width}"
                )));
            }
        }
        Self::from_bits(width, height, bits)
    }
}
