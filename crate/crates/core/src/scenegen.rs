//! Seeded synthetic scenes.
//!
//! A scene is a handful of yawed boxes with points sampled on their
//! faces, uniform clutter, a pinhole camera on an orbit around the
//! workspace, the foreground mask obtained by filling the projected box
//! silhouettes, and a smooth procedural image feature map.
//!
//! Randomness comes from `ChaCha8Rng`, so a `(spec, seed)` pair gives the
//! same scene on every platform.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fago::Box3D;
use crate::features::FeatureRows;
use crate::fusion::FeatureMap2D;
use crate::voxgrid::{project_point, CameraModel, ForegroundMask, MIN_DEPTH};

/// Stream offset for the mask-noise generator, so noise never perturbs
/// the geometry draws.
const NOISE_STREAM: u64 = 0x6d61_736b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub n_boxes: usize,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub box_size_min: [f64; 3],
    pub box_size_max: [f64; 3],
    pub points_per_box: usize,
    pub clutter_points: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub d_img: usize,
    /// Image pixels per feature-map cell along each axis.
    pub feature_downscale: u32,
    /// Field of view (degrees) covering the smaller image side.
    pub fov_deg: f64,
    pub elevation_deg: [f64; 2],
    /// Probability of flipping each mask bit after rendering.
    pub mask_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_boxes: 3,
            workspace_min: [-10.0, -10.0, 0.0],
            workspace_max: [10.0, 10.0, 3.0],
            box_size_min: [1.0, 1.0, 1.0],
            box_size_max: [4.0, 2.5, 2.0],
            points_per_box: 400,
            clutter_points: 2000,
            image_width: 320,
            image_height: 240,
            d_img: 8,
            feature_downscale: 4,
            fov_deg: 60.0,
            elevation_deg: [20.0, 45.0],
            mask_noise: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.workspace_max[a] > self.workspace_min[a]) {
                return Err(Error::InvalidParameter("workspace must have positive extent".into()));
            }
            if !(self.box_size_min[a] > 0.0 && self.box_size_max[a] >= self.box_size_min[a]) {
                return Err(Error::InvalidParameter("box size ranges must be positive".into()));
            }
        }
        if self.n_boxes > 0 {
            let half_diag = 0.5 * self.box_size_max[0].hypot(self.box_size_max[1]);
            let fits_xy = (0..2).all(|a| self.workspace_max[a] - self.workspace_min[a] > 2.0 * half_diag);
            let fits_z = self.workspace_max[2] - self.workspace_min[2] >= self.box_size_max[2];
            if !(fits_xy && fits_z) {
                return Err(Error::InvalidParameter("largest box does not fit in the workspace".into()));
            }
        }
        if self.image_width == 0 || self.image_height == 0 || self.d_img == 0 || self.feature_downscale == 0 {
            return Err(Error::InvalidParameter("image size, d_img and downscale must be positive".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return Err(Error::InvalidParameter("fov_deg must lie in (0, 170)".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_noise) {
            return Err(Error::InvalidParameter("mask_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.workspace_min[a] + self.workspace_max[a]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub boxes: Vec<Box3D>,
    pub points: Vec<[f64; 3]>,
    pub point_features: FeatureRows,
    pub camera: CameraModel,
    pub mask: ForegroundMask,
    pub feature_map: FeatureMap2D,
    pub seed: u64,
}

/// Low-frequency sinusoid bank used for both point and image features.
struct Field {
    // per channel: (frequency vector, phase, amplitude) × 3 terms
    terms: Vec<[([f64; 3], f64, f64); 3]>,
}

impl Field {
    fn sample<R: Rng>(rng: &mut R, dim: usize, freq: f64) -> Self {
        let terms = (0..dim)
            .map(|_| {
                [0, 1, 2].map(|_| {
                    let f = [0, 1, 2].map(|_| rng.gen_range(-freq..freq));
                    (f, rng.gen_range(0.0..TAU), rng.gen_range(0.3..1.0))
                })
            })
            .collect();
        Self { terms }
    }

    fn eval(&self, p: [f64; 3], out: &mut Vec<f64>) {
        out.clear();
        for ch in &self.terms {
            let v: f64 = ch
                .iter()
                .map(|(f, ph, a)| a * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + ph).sin())
                .sum();
            out.push(v / 3.0);
        }
    }
}

fn look_at(eye: [f64; 3], target: [f64; 3]) -> [[f64; 3]; 3] {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let unit = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let forward = unit(sub(target, eye));
    let right = unit(cross(forward, [0.0, 0.0, 1.0]));
    let down = cross(forward, right);
    [right, down, forward]
}

fn orbit_camera<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<CameraModel> {
    let target = spec.centroid();
    let half: [f64; 3] = [0, 1, 2].map(|a| 0.5 * (spec.workspace_max[a] - spec.workspace_min[a]));
    let rho = (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt();
    let half_fov = spec.fov_deg.to_radians() / 2.0;
    let dist = rho / half_fov.sin();
    let az = rng.gen_range(0.0..TAU);
    let (lo, hi) = (spec.elevation_deg[0], spec.elevation_deg[1].max(spec.elevation_deg[0]));
    let el = if hi > lo { rng.gen_range(lo..hi) } else { lo }.to_radians();
    let eye = [
        target[0] + dist * el.cos() * az.cos(),
        target[1] + dist * el.cos() * az.sin(),
        target[2] + dist * el.sin(),
    ];
    let r = look_at(eye, target);
    let t = [0, 1, 2].map(|i| -(r[i][0] * eye[0] + r[i][1] * eye[1] + r[i][2] * eye[2]));
    let (w, h) = (spec.image_width, spec.image_height);
    let f = 0.5 * w.min(h) as f64 / half_fov.tan();
    CameraModel::new(f, f, w as f64 / 2.0, h as f64 / 2.0, r, t, w, h)
}

/// Convex hull (counter-clockwise, no collinear points).
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

/// Fills the convex hull of each box's projected corners. Boxes with a
/// corner at or behind the image plane are skipped.
pub fn render_mask(boxes: &[Box3D], cam: &CameraModel) -> ForegroundMask {
    let mut mask = ForegroundMask::zeros(cam.width, cam.height);
    for b in boxes {
        let mut pts = Vec::with_capacity(8);
        let mut in_front = true;
        for c in b.corners() {
            let q = cam.to_camera_frame(c);
            if q[2] <= MIN_DEPTH {
                in_front = false;
                break;
            }
            pts.push([cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy]);
        }
        if !in_front {
            continue;
        }
        let hull = convex_hull(pts);
        if hull.len() < 3 {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &hull {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let xa = x0.floor().max(0.0) as i64;
        let ya = y0.floor().max(0.0) as i64;
        let xb = (x1.ceil() as i64).min(cam.width as i64 - 1);
        let yb = (y1.ceil() as i64).min(cam.height as i64 - 1);
        for y in ya..=yb {
            for x in xa..=xb {
                if inside_convex(&hull, [x as f64 + 0.5, y as f64 + 0.5]) {
                    mask.set(x as u32, y as u32, true);
                }
            }
        }
    }
    mask
}

fn sample_box(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Box3D> {
    let size = [0, 1, 2].map(|a| {
        let (lo, hi) = (spec.box_size_min[a], spec.box_size_max[a]);
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    });
    let half_diag = 0.5 * size[0].hypot(size[1]);
    let margin = [half_diag, half_diag, size[2] / 2.0];
    let center = [0, 1, 2].map(|a| {
        let lo = spec.workspace_min[a] + margin[a];
        let hi = spec.workspace_max[a] - margin[a];
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            0.5 * (lo + hi)
        }
    });
    let mut yaw = rng.gen_range(-PI..PI);
    if yaw <= -PI {
        yaw = PI;
    }
    Box3D::new(center, size, yaw)
}

fn sample_surface(b: &Box3D, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let [l, w, h] = b.size();
    let areas = [w * h, l * h, l * w];
    let total = areas.iter().sum::<f64>();
    let mut pick = rng.gen_range(0.0..total);
    let mut axis = 0;
    while axis < 2 && pick >= areas[axis] {
        pick -= areas[axis];
        axis += 1;
    }
    let side = if rng.gen_bool(0.5) { 0.5 } else { -0.5 };
    let mut q = [0, 1, 2].map(|a| rng.gen_range(-0.5..0.5) * b.size()[a]);
    q[axis] = side * b.size()[axis];
    b.to_world(q)
}

/// Clamps tiny rounding excursions back into the workspace.
fn clamp_to(p: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| p[a].clamp(lo[a], hi[a]))
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.d_img;

    let boxes = (0..spec.n_boxes)
        .map(|_| sample_box(spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let point_field = Field::sample(&mut rng, dim, 0.6);
    let box_offsets: Vec<Vec<f64>> = boxes
        .iter()
        .map(|_| (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();

    let mut points = Vec::with_capacity(spec.n_boxes * spec.points_per_box + spec.clutter_points);
    let mut point_features = FeatureRows::new(dim);
    let mut row = Vec::with_capacity(dim);
    for (bi, b) in boxes.iter().enumerate() {
        for _ in 0..spec.points_per_box {
            let p = clamp_to(sample_surface(b, &mut rng), spec.workspace_min, spec.workspace_max);
            point_field.eval(p, &mut row);
            for (r, o) in row.iter_mut().zip(&box_offsets[bi]) {
                *r += o;
            }
            points.push(p);
            point_features.push(&row)?;
        }
    }
    for _ in 0..spec.clutter_points {
        let p = [0, 1, 2].map(|a| rng.gen_range(spec.workspace_min[a]..spec.workspace_max[a]));
        point_field.eval(p, &mut row);
        points.push(p);
        point_features.push(&row)?;
    }

    let camera = orbit_camera(spec, &mut rng)?;
    let mut mask = render_mask(&boxes, &camera);

    let fw = (spec.image_width / spec.feature_downscale).max(1);
    let fh = (spec.image_height / spec.feature_downscale).max(1);
    let image_field = Field::sample(&mut rng, dim, 2.0 * TAU);
    let mut data = Vec::with_capacity(fw as usize * fh as usize * dim);
    for j in 0..fh {
        for i in 0..fw {
            let p = [(i as f64 + 0.5) / fw as f64, (j as f64 + 0.5) / fh as f64, 0.0];
            image_field.eval(p, &mut row);
            // stored as f32 in scene files, so keep values f32-exact
            data.extend(row.iter().map(|v| *v as f32 as f64));
        }
    }
    let feature_map = FeatureMap2D::new(fw, fh, dim, data)?;

    if spec.mask_noise > 0.0 {
        let mut noise = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if noise.gen_bool(spec.mask_noise) {
                    let b = mask.get(x, y);
                    mask.set(x, y, !b);
                }
            }
        }
    }

    Ok(SyntheticScene {
        boxes,
        points,
        point_features,
        camera,
        mask,
        feature_map,
        seed,
    })
}

impl SyntheticScene {
    pub fn empty(spec: &SceneSpec, seed: u64) -> Result<Self> {
        let s = SceneSpec {
            n_boxes: 0,
            points_per_box: 0,
            clutter_points: 0,
            ..spec.clone()
        };
        generate_scene(&s, seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SceneFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SceneFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.count_ones() as f64 / (self.mask.width() as f64 * self.mask.height() as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    width: u32,
    height: u32,
    rows: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct FeatureMapFile {
    width: u32,
    height: u32,
    dim: usize,
    /// Little-endian f32, base64.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    boxes: Vec<Box3D>,
    points: Vec<[f64; 3]>,
    point_features: FeatureRows,
    camera: CameraModel,
    mask: MaskFile,
    feature_map: FeatureMapFile,
    seed: u64,
}

impl From<&SyntheticScene> for SceneFile {
    fn from(s: &SyntheticScene) -> Self {
        let mut bytes = Vec::with_capacity(s.feature_map.data().len() * 4);
        for v in s.feature_map.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        SceneFile {
            boxes: s.boxes.clone(),
            points: s.points.clone(),
            point_features: s.point_features.clone(),
            camera: s.camera.clone(),
            mask: MaskFile {
                width: s.mask.width(),
                height: s.mask.height(),
                rows: s.mask.to_rle_rows(),
            },
            feature_map: FeatureMapFile {
                width: s.feature_map.width(),
                height: s.feature_map.height(),
                dim: s.feature_map.dim(),
                data: B64.encode(bytes),
            },
            seed: s.seed,
        }
    }
}

impl TryFrom<SceneFile> for SyntheticScene {
    type Error = Error;

    fn try_from(f: SceneFile) -> Result<Self> {
        let mask = ForegroundMask::from_rle_rows(f.mask.width, f.mask.height, &f.mask.rows)?;
        if !mask.matches_camera(&f.camera) {
            return Err(Error::Format("mask size does not match the camera image".into()));
        }
        let bytes = B64
            .decode(f.feature_map.data.as_bytes())
            .map_err(|e| Error::Format(format!("feature map base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("feature map byte length is not a multiple of 4".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let feature_map = FeatureMap2D::new(f.feature_map.width, f.feature_map.height, f.feature_map.dim, data)?;
        if !f.points.is_empty() && f.point_features.len() != f.points.len() {
            return Err(Error::Format(format!(
                "{} points but {} feature rows",
                f.points.len(),
                f.point_features.len()
            )));
        }
        if f.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("scene points"));
        }
        let point_features = if f.points.is_empty() {
            FeatureRows::new(feature_map.dim())
        } else {
            f.point_features
        };
        Ok(SyntheticScene {
            boxes: f.boxes,
            points: f.points,
            point_features,
            camera: f.camera,
            mask,
            feature_map,
            seed: f.seed,
        })
    }
}

/// True if `(u, v)` or any of its 8 neighbouring pixels is foreground.
pub fn mask_hit_with_slack(mask: &ForegroundMask, u: f64, v: f64) -> bool {
    let (x, y) = (u.floor() as i64, v.floor() as i64);
    (-1..=1).any(|dy| {
        (-1..=1).any(|dx| {
            let (xx, yy) = (x + dx, y + dy);
            xx >= 0 && yy >= 0 && mask.get(xx as u32, yy as u32)
        })
    })
}

/// Fraction of `points` whose projection hits the mask within one pixel.
pub fn box_point_consistency(scene: &SyntheticScene, points: &[[f64; 3]]) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let hits = points
        .iter()
        .filter(|&&p| {
            let pr = project_point(&scene.camera, p);
            pr.valid && mask_hit_with_slack(&scene.mask, pr.u, pr.v)
        })
        .count();
    hits as f64 / points.len() as f64
}
