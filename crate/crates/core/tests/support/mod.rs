//! Brute-force reference implementations and random instance builders
//! shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hvx_core::fago::Box3D;
use hvx_core::voxgrid::{CameraModel, Coord, ForegroundMask, SparseVoxelGrid};
use hvx_core::FeatureRows;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Cells = Vec<(Coord, Vec<f64>)>;

pub fn cells_of(g: &SparseVoxelGrid) -> Cells {
    g.coords()
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, g.features().row(i).to_vec()))
        .collect()
}

pub fn voxelize(points: &[[f64; 3]], feats: &FeatureRows, origin: [f64; 3], pitch: f64) -> Cells {
    let mut groups: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let c = [0, 1, 2].map(|a| ((p[a] - origin[a]) / pitch).floor() as i32);
        groups.entry(c).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(c, members)| {
            let mut sum = vec![0.0; feats.dim()];
            for &i in &members {
                for (s, v) in sum.iter_mut().zip(feats.row(i)) {
                    *s += v;
                }
            }
            let n = members.len() as f64;
            (c, sum.into_iter().map(|s| s / n).collect())
        })
        .collect()
}

/// Pinhole projection straight from the definition.
pub fn pixel_of(cam: &CameraModel, p: [f64; 3]) -> Option<(f64, f64)> {
    let r = cam.rotation;
    let mut q = cam.translation;
    for i in 0..3 {
        q[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
    }
    if q[2] <= 1e-6 {
        return None;
    }
    let u = cam.fx * q[0] / q[2] + cam.cx;
    let v = cam.fy * q[1] / q[2] + cam.cy;
    (u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64).then_some((u, v))
}

/// Row indices of the foreground voxels.
pub fn partition(g: &SparseVoxelGrid, mask: &ForegroundMask, cam: &CameraModel) -> Vec<usize> {
    (0..g.len())
        .filter(|&i| match pixel_of(cam, g.center(i)) {
            Some((u, v)) => mask.get(u.floor() as u32, v.floor() as u32),
            None => false,
        })
        .collect()
}

pub fn densify(cells: &Cells) -> Cells {
    if cells.is_empty() {
        return Vec::new();
    }
    let existing: BTreeMap<Coord, &Vec<f64>> = cells.iter().map(|(c, f)| (*c, f)).collect();
    let lo = [0, 1, 2].map(|a| cells.iter().map(|(c, _)| c[a]).min().unwrap() - 1);
    let hi = [0, 1, 2].map(|a| cells.iter().map(|(c, _)| c[a]).max().unwrap() + 1);
    let dim = cells[0].1.len();
    let mut out = Vec::new();
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                let c = [x, y, z];
                if let Some(f) = existing.get(&c) {
                    out.push((c, (*f).clone()));
                    continue;
                }
                let mut sum = vec![0.0; dim];
                let mut n = 0;
                for (s, f) in cells {
                    if (0..3).all(|a| (s[a] - c[a]).abs() <= 1) {
                        for (acc, v) in sum.iter_mut().zip(f) {
                            *acc += v;
                        }
                        n += 1;
                    }
                }
                if n > 0 {
                    out.push((c, sum.into_iter().map(|v| v / n as f64).collect()));
                }
            }
        }
    }
    out
}

pub fn sparsify(cells: &Cells, s: i32) -> Cells {
    let groups: BTreeSet<Coord> = cells
        .iter()
        .map(|(c, _)| c.map(|v| (v as f64 / s as f64).floor() as i32))
        .collect();
    groups
        .into_iter()
        .map(|g| {
            let mut best: Option<Vec<f64>> = None;
            for (c, f) in cells {
                let inside = (0..3).all(|a| c[a] >= g[a] * s && c[a] < (g[a] + 1) * s);
                if inside {
                    best = Some(match best {
                        None => f.clone(),
                        Some(b) => b.iter().zip(f).map(|(x, y)| if y > x { *y } else { *x }).collect(),
                    });
                }
            }
            (g, best.unwrap())
        })
        .collect()
}

pub fn merge(fg: &Cells, bg: &Cells, scale: i32) -> Cells {
    let mut m: BTreeMap<Coord, Vec<f64>> = BTreeMap::new();
    for (c, f) in bg {
        m.insert(c.map(|v| v * scale), f.clone());
    }
    for (c, f) in fg {
        m.insert(*c, f.clone());
    }
    m.into_iter().collect()
}

pub fn in_box(b: &Box3D, p: [f64; 3]) -> bool {
    let (s, c) = b.yaw().sin_cos();
    let d = [0, 1, 2].map(|a| p[a] - b.center()[a]);
    let q = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    (0..3).all(|a| q[a].abs() <= b.size()[a] / 2.0)
}

pub fn label(centers: &[[f64; 3]], boxes: &[Box3D]) -> Vec<Option<usize>> {
    centers
        .iter()
        .map(|&p| {
            let mut hits: Vec<usize> = (0..boxes.len()).filter(|&k| in_box(&boxes[k], p)).collect();
            hits.sort_by(|&a, &b| boxes[a].volume().partial_cmp(&boxes[b].volume()).unwrap().then(a.cmp(&b)));
            hits.first().copied()
        })
        .collect()
}

pub fn topk(coords: &[Coord], scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(coords[a].cmp(&coords[b])));
    idx.truncate(k);
    idx
}

// ---- random instances ----

pub fn random_grid(rng: &mut ChaCha8Rng, max_voxels: usize, span: i32, dim: usize) -> SparseVoxelGrid {
    let n = rng.gen_range(0..=max_voxels);
    let mut set = BTreeSet::new();
    for _ in 0..n {
        set.insert([0, 1, 2].map(|_| rng.gen_range(-span..span)));
    }
    let mut coords: Vec<Coord> = set.into_iter().collect();
    // shuffle so the implementations cannot rely on sorted input
    for i in (1..coords.len()).rev() {
        let j = rng.gen_range(0..=i);
        coords.swap(i, j);
    }
    let data = (0..coords.len() * dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let f = FeatureRows::from_flat(dim, data).unwrap();
    let vs = rng.gen_range(0.1..0.5);
    SparseVoxelGrid::new(1, vs, [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0], coords, f).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64, dim: usize) -> (Vec<[f64; 3]>, FeatureRows) {
    let pts = (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(-extent..extent)))
        .collect();
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (pts, FeatureRows::from_flat(dim, data).unwrap())
}

pub fn random_boxes(rng: &mut ChaCha8Rng, max: usize, extent: f64) -> Vec<Box3D> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| {
            let c = [0, 1, 2].map(|_| rng.gen_range(-extent..extent));
            let s = [0, 1, 2].map(|_| rng.gen_range(0.2..extent));
            Box3D::new(c, s, rng.gen_range(-3.1..3.1)).unwrap()
        })
        .collect()
}

/// Camera at `eye` looking at the origin with z up.
pub fn camera_looking_at_origin(eye: [f64; 3], w: u32, h: u32, f: f64) -> CameraModel {
    let n = |a: [f64; 3]| {
        let l = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        a.map(|v| v / l)
    };
    let fwd = n(eye.map(|v| -v));
    let right = n([fwd[1], -fwd[0], 0.0]);
    let down = [
        fwd[1] * right[2] - fwd[2] * right[1],
        fwd[2] * right[0] - fwd[0] * right[2],
        fwd[0] * right[1] - fwd[1] * right[0],
    ];
    let r = [right, down, fwd];
    let t = [0, 1, 2].map(|i| -(r[i][0] * eye[0] + r[i][1] * eye[1] + r[i][2] * eye[2]));
    CameraModel::new(f, f, w as f64 / 2.0, h as f64 / 2.0, r, t, w, h).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, p: f64) -> ForegroundMask {
    let bits = (0..w * h).map(|_| rng.gen_bool(p)).collect();
    ForegroundMask::from_bits(w, h, bits).unwrap()
}

// ---- oracle comparisons, one random instance per seed ----

use hvx_core::fago::{label_foreground, topk_filter};
use hvx_core::voxgrid::{self as vg, VoxelParams};
use rand::SeedableRng;

pub type Check = Result<(), String>;
pub type NamedCheck = (&'static str, fn(u64) -> Check);

fn same(what: &str, seed: u64, got: &Cells, want: &Cells) -> Check {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what} seed {seed}: {} cells vs oracle {}", got.len(), want.len()))
    }
}

pub fn check_voxelize(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(0..=1000);
    let (pts, feats) = random_points(&mut rng, n, 3.0, 3);
    let stride = rng.gen_range(1..4);
    let params = VoxelParams::new(rng.gen_range(0.1..0.6), [0.3, -0.2, 0.1], stride);
    let g = vg::voxelize(&pts, Some(&feats), &params).map_err(|e| e.to_string())?;
    let want = voxelize(&pts, &feats, params.origin, params.voxel_size * stride as f64);
    same("voxelize", seed, &cells_of(&g), &want)
}

pub fn check_partition(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_grid(&mut rng, 1000, 12, 2);
    let eye = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(1.0..6.0)];
    let cam = camera_looking_at_origin(eye, 40, 30, rng.gen_range(10.0..40.0));
    let density = rng.gen_range(0.0..1.0);
    let mask = random_mask(&mut rng, 40, 30, density);
    let (fg, bg) = vg::partition_fg_bg(&g, &mask, &cam).map_err(|e| e.to_string())?;
    let want_fg = partition(&g, &mask, &cam);
    let want_bg: Vec<usize> = (0..g.len()).filter(|i| !want_fg.contains(i)).collect();
    let got_fg = cells_of(&fg);
    let got_bg = cells_of(&bg);
    same("partition fg", seed, &got_fg, &cells_of(&g.select(&want_fg)))?;
    same("partition bg", seed, &got_bg, &cells_of(&g.select(&want_bg)))
}

pub fn check_densify(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_grid(&mut rng, 1000, 8, 2);
    let d = vg::densify_foreground(&g).map_err(|e| e.to_string())?;
    same("densify", seed, &cells_of(&d), &densify(&cells_of(&g)))
}

pub fn check_sparsify(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_grid(&mut rng, 1000, 20, 2);
    let s = rng.gen_range(1..8);
    let p = vg::sparsify_background(&g, s as u32).map_err(|e| e.to_string())?;
    if p.stride() != s as u32 {
        return Err(format!("sparsify seed {seed}: stride {}", p.stride()));
    }
    same("sparsify", seed, &cells_of(&p), &sparsify(&cells_of(&g), s))
}

pub fn check_merge(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = random_grid(&mut rng, 500, 10, 2).sorted();
    let raw = random_grid(&mut rng, 500, 10, 2);
    let raw = SparseVoxelGrid::new(1, fg.voxel_size(), fg.origin(), raw.coords().to_vec(), raw.features().clone())
        .map_err(|e| e.to_string())?;
    let s = rng.gen_range(1..4);
    let bg = vg::sparsify_background(&raw, s).map_err(|e| e.to_string())?;
    let m = vg::merge(&fg, &bg).map_err(|e| e.to_string())?;
    same("merge", seed, &cells_of(&m), &merge(&cells_of(&fg), &cells_of(&bg), s as i32))
}

pub fn check_label(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_grid(&mut rng, 1000, 10, 1);
    let boxes = random_boxes(&mut rng, 50, 2.0);
    let got = label_foreground(&g, &boxes);
    let want = label(&g.centers(), &boxes);
    if got.assigned != want {
        return Err(format!("label seed {seed}: assignments differ"));
    }
    if got.labels != want.iter().map(Option::is_some).collect::<Vec<_>>() {
        return Err(format!("label seed {seed}: labels differ"));
    }
    Ok(())
}

pub fn check_topk(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_grid(&mut rng, 1000, 10, 1);
    // coarse scores so ties are common
    let scores: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
    let k = rng.gen_range(1..=1100);
    let got = topk_filter(&g, &scores, k).map_err(|e| e.to_string())?;
    let want = topk(g.coords(), &scores, k);
    if got.indices != want {
        return Err(format!("topk seed {seed}: order differs"));
    }
    if got.grid.coords() != g.select(&want).coords() {
        return Err(format!("topk seed {seed}: grid differs"));
    }
    Ok(())
}

pub const ORACLE_CHECKS: [NamedCheck; 7] = [
    ("voxelize", check_voxelize),
    ("partition_fg_bg", check_partition),
    ("densify", check_densify),
    ("sparsify", check_sparsify),
    ("merge", check_merge),
    ("label_foreground", check_label),
    ("topk_filter", check_topk),
];

// ---- hyperbolic identities ----

use hvx_core::hyperball::{log_map_zero, mobius_add, BallPoint, PoincareBall};

/// Uniform direction, norm uniform in `[0, 0.999 * clip_norm)`.
pub fn random_ball_point(rng: &mut ChaCha8Rng, dim: usize, ball: &PoincareBall) -> BallPoint {
    let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let r = rng.gen_range(0.0..0.999) * ball.clip_norm();
    BallPoint::new(dir.iter().map(|v| v / n * r).collect(), ball).unwrap()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn check_hyperbolic_identities(k_abs: f64, pairs: usize, seed: u64) -> Check {
    let ball = PoincareBall::new(-k_abs, 1e-5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let dim = rng.gen_range(1..9);
        let x = random_ball_point(&mut rng, dim, &ball);
        let z = random_ball_point(&mut rng, dim, &ball);

        let id = mobius_add(&BallPoint::origin(dim), &x, &ball).map_err(|e| e.to_string())?;
        let err = id.coords().iter().zip(x.coords()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err > 1e-12 {
            return Err(format!("|k|={k_abs} pair {i}: left identity off by {err:e}"));
        }

        let inv = mobius_add(&x.neg(), &x, &ball).map_err(|e| e.to_string())?;
        if l2(inv.coords()) > 1e-9 {
            return Err(format!("|k|={k_abs} pair {i}: left inverse norm {:e}", l2(inv.coords())));
        }

        let sum = mobius_add(&z, &x, &ball).map_err(|e| e.to_string())?;
        if !(l2(sum.coords()) < ball.radius()) {
            return Err(format!("|k|={k_abs} pair {i}: sum escaped the ball"));
        }

        let s = k_abs.sqrt();
        let want = (s * l2(x.coords())).atanh() / s;
        let got = l2(log_map_zero(&x, &ball).coords());
        let rel = if want == 0.0 { got } else { (got - want).abs() / want };
        if rel > 1e-12 {
            return Err(format!("|k|={k_abs} pair {i}: log norm relative error {rel:e}"));
        }
    }
    Ok(())
}

// ---- SGVO invariants on generated scenes ----

use hvx_core::scenegen::{generate_scene, SceneSpec};

pub fn check_sgvo_invariants(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec {
        n_boxes: rng.gen_range(0..6),
        points_per_box: rng.gen_range(50..300),
        clutter_points: rng.gen_range(0..1500),
        image_width: 96,
        image_height: 72,
        d_img: 3,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec, seed).map_err(|e| e.to_string())?;
    let stride = 1u32 << rng.gen_range(0..3);
    let params = VoxelParams::new(rng.gen_range(0.1..0.4), [0.0; 3], stride);
    let g = vg::voxelize(&scene.points, Some(&scene.point_features), &params).map_err(|e| e.to_string())?;
    let (fg, bg) = vg::partition_fg_bg(&g, &scene.mask, &scene.camera).map_err(|e| e.to_string())?;

    let all: BTreeSet<Coord> = g.coords().iter().copied().collect();
    let f: BTreeSet<Coord> = fg.coords().iter().copied().collect();
    let b: BTreeSet<Coord> = bg.coords().iter().copied().collect();
    if f.len() != fg.len() || b.len() != bg.len() || !f.is_disjoint(&b) {
        return Err(format!("scene {seed}: fg/bg overlap"));
    }
    if f.union(&b).copied().collect::<BTreeSet<_>>() != all {
        return Err(format!("scene {seed}: fg/bg union is not the input"));
    }

    let d = vg::densify_foreground(&fg).map_err(|e| e.to_string())?;
    if d.len() > 27 * fg.len() {
        return Err(format!("scene {seed}: densify produced {} from {}", d.len(), fg.len()));
    }
    for s in 1..5 {
        let p = vg::sparsify_background(&bg, s).map_err(|e| e.to_string())?;
        if p.len() > bg.len() {
            return Err(format!("scene {seed}: sparsify s={s} grew {} -> {}", bg.len(), p.len()));
        }
    }
    let same = vg::sparsify_background(&bg, 1).map_err(|e| e.to_string())?;
    if cells_of(&same) != cells_of(&bg.sorted()) || same.stride() != bg.stride() {
        return Err(format!("scene {seed}: s=1 is not the identity"));
    }
    Ok(())
}

// ---- small scenes for end-to-end runs ----

use hvx_core::objective::Config;
use hvx_core::pipeline::{gradient_descent, Pipeline};

/// One box in a 6 m room: few enough voxels that the top-K selection
/// keeps everything and the objective stays smooth.
pub fn small_spec() -> SceneSpec {
    SceneSpec {
        n_boxes: 1,
        points_per_box: 40,
        clutter_points: 60,
        image_width: 64,
        image_height: 48,
        d_img: 4,
        workspace_min: [-3.0, -3.0, 0.0],
        workspace_max: [3.0, 3.0, 2.0],
        box_size_min: [1.0; 3],
        box_size_max: [2.0, 2.0, 1.5],
        ..SceneSpec::default()
    }
}

pub fn small_config(detach_teacher: bool) -> Config {
    Config {
        detach_teacher,
        voxel_size: 0.5,
        ..Config::default()
    }
}

pub const DESCENT_LR: f64 = 1e-4;

/// 200 fixed steps; needs a lower final loss and at least 18 of the 20
/// ten-step windows decreasing.
pub fn check_descent(scene_seed: u64, detach_teacher: bool) -> Check {
    let scene = generate_scene(&small_spec(), scene_seed).map_err(|e| e.to_string())?;
    let pipe = Pipeline::prepare(&scene, &small_config(detach_teacher)).map_err(|e| e.to_string())?;
    let mut model = pipe.init_model().map_err(|e| e.to_string())?;
    let h = gradient_descent(&pipe, &mut model, DESCENT_LR, 200).map_err(|e| e.to_string())?;
    let windows = (0..20).filter(|w| h[(w + 1) * 10] < h[w * 10]).count();
    let tag = format!("scene {scene_seed} detach {detach_teacher}");
    if !(h[200] < h[0]) {
        return Err(format!("{tag}: loss went {} -> {}", h[0], h[200]));
    }
    if windows < 18 {
        return Err(format!("{tag}: only {windows}/20 windows decreased"));
    }
    Ok(())
}
