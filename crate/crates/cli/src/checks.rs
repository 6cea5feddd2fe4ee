//! Randomized finite-difference checks for every differentiable loss.
//!
//! Each check draws a small, well-scaled instance from a seed, rejects
//! draws that land within a kink neighbourhood (clip threshold, hinge,
//! ReLU), and compares the analytic gradient with central differences.

use hvx_core::fago::{center_vote_loss, focal_importance_loss, triplet_loss, Box3D, FocalParams, VoteOutput};
use hvx_core::fusion::{fuse, fuse_backward, Activation, MlpParams};
use hvx_core::hyperball::{hyperbolic_distill_loss, PoincareBall};
use hvx_core::objective::{grad_check, Config, GradCheckReport};
use hvx_core::FeatureRows;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

/// Distance from a branch point below which an instance is redrawn.
const KINK_GAP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Distill,
    Fusion,
    Focal,
    Vote,
    Triplet,
}

impl Op {
    pub const ALL: [Op; 5] = [Op::Distill, Op::Fusion, Op::Focal, Op::Vote, Op::Triplet];

    pub fn name(self) -> &'static str {
        match self {
            Op::Distill => "hyperbolic_distill",
            Op::Fusion => "fusion",
            Op::Focal => "focal",
            Op::Vote => "center_vote",
            Op::Triplet => "triplet",
        }
    }
}

fn uniform_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> FeatureRows {
    let data = (0..n * dim).map(|_| rng.gen_range(-scale..scale)).collect();
    FeatureRows::from_flat(dim, data).expect("shape")
}

fn split(x: &[f64], dim: usize, counts: &[usize]) -> Vec<FeatureRows> {
    let mut at = 0;
    counts
        .iter()
        .map(|&n| {
            let rows = FeatureRows::from_flat(dim, x[at..at + n * dim].to_vec()).expect("shape");
            at += n * dim;
            rows
        })
        .collect()
}

fn near_clip(rows: &FeatureRows, ball: &PoincareBall) -> bool {
    rows.iter().any(|r| {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        (n - ball.clip_norm()).abs() < KINK_GAP
    })
}

pub fn check_distill(seed: u64, config: &Config) -> hvx_core::Result<GradCheckReport> {
    let ball = config.ball()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4;
    let scale = 0.9 * ball.radius();
    let (counts, teacher, student) = loop {
        let counts: Vec<usize> = (0..3).map(|_| rng.gen_range(1..5)).collect();
        let t: Vec<FeatureRows> = counts.iter().map(|&n| uniform_rows(&mut rng, n, dim, scale)).collect();
        let s: Vec<FeatureRows> = counts.iter().map(|&n| uniform_rows(&mut rng, n, dim, scale)).collect();
        if !t.iter().chain(&s).any(|r| near_clip(r, &ball)) {
            break (counts, t, s);
        }
    };
    let out = hyperbolic_distill_loss(&teacher, &student, &ball)?;
    let x: Vec<f64> = teacher.iter().chain(&student).flat_map(|r| r.as_slice().to_vec()).collect();
    let g: Vec<f64> = out
        .grad_teacher
        .iter()
        .chain(&out.grad_student)
        .flat_map(|r| r.as_slice().to_vec())
        .collect();
    let half = x.len() / 2;
    let f = |v: &[f64]| {
        let t = split(&v[..half], dim, &counts);
        let s = split(&v[half..], dim, &counts);
        hyperbolic_distill_loss(&t, &s, &ball).map(|l| l.loss).unwrap_or(f64::NAN)
    };
    grad_check(f, &x, &g, STEP, TOL)
}

fn relu_pre_activations(m: &MlpParams, x: &FeatureRows) -> Vec<f64> {
    let trace = m.forward(x).expect("shape");
    let mut pre = Vec::new();
    let mut input = x.clone();
    for (layer, out) in m.layers().iter().zip(&trace.outputs) {
        if layer.act == Activation::Relu {
            for r in input.iter() {
                for (w, b) in layer.w.iter().zip(&layer.b) {
                    pre.push(w.iter().zip(r).map(|(a, c)| a * c).sum::<f64>() + b);
                }
            }
        }
        input = out.clone();
    }
    pre
}

pub fn check_fusion(seed: u64, _config: &Config) -> hvx_core::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, h) = (4, 3, 5);
    let (image, voxel, fm, gm) = loop {
        let image = uniform_rows(&mut rng, n, d, 1.0);
        let voxel = uniform_rows(&mut rng, n, d, 1.0);
        let fm = MlpParams::two_layer(2 * d, h, d, Activation::None, &mut rng)?;
        let gm = MlpParams::two_layer(d, h, d, Activation::None, &mut rng)?;
        let fwd = fuse(&image, &voxel, &fm, &gm)?;
        let mut concat = FeatureRows::new(2 * d);
        for i in 0..n {
            let row: Vec<f64> = image.row(i).iter().chain(voxel.row(i)).copied().collect();
            concat.push(&row)?;
        }
        let mut pre = relu_pre_activations(&fm, &concat);
        pre.extend(relu_pre_activations(&gm, fwd.fused()));
        if pre.iter().all(|z| z.abs() > KINK_GAP) {
            break (image, voxel, fm, gm);
        }
    };
    // L = Σ w ∘ F_2d3d with fixed random weights
    let w = uniform_rows(&mut rng, n, d, 1.0);
    let fwd = fuse(&image, &voxel, &fm, &gm)?;
    let grads = fuse_backward(&fwd, &fm, &gm, &w)?;

    let sizes = [n * d, n * d, fm.num_params(), gm.num_params()];
    let mut x = image.as_slice().to_vec();
    x.extend_from_slice(voxel.as_slice());
    x.extend(fm.to_flat());
    x.extend(gm.to_flat());
    let mut g = grads.image.as_slice().to_vec();
    g.extend_from_slice(grads.voxel.as_slice());
    g.extend(grads.fuse_mlp.to_flat());
    g.extend(grads.gate_mlp.to_flat());

    let f = |v: &[f64]| {
        let mut at = 0;
        let mut take = |k: usize| {
            let s = &v[at..at + k];
            at += k;
            s.to_vec()
        };
        let im = FeatureRows::from_flat(d, take(sizes[0])).expect("shape");
        let vx = FeatureRows::from_flat(d, take(sizes[1])).expect("shape");
        let mut fm2 = fm.clone();
        fm2.set_flat(&take(sizes[2])).expect("shape");
        let mut gm2 = gm.clone();
        gm2.set_flat(&take(sizes[3])).expect("shape");
        match fuse(&im, &vx, &fm2, &gm2) {
            Ok(o) => o.output.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    };
    grad_check(f, &x, &g, STEP, TOL)
}

pub fn check_focal(seed: u64, config: &Config) -> hvx_core::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(3..12);
    let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..0.95)).collect();
    let labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
    let params: FocalParams = config.focal();
    let out = focal_importance_loss(&scores, &labels, &params)?;
    let f = |v: &[f64]| {
        focal_importance_loss(v, &labels, &params)
            .map(|l| l.loss)
            .unwrap_or(f64::NAN)
    };
    grad_check(f, &scores, &out.grad, STEP, TOL)
}

pub fn check_vote(seed: u64, _config: &Config) -> hvx_core::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = rng.gen_range(1..4);
    let boxes: Vec<Box3D> = (0..nb)
        .map(|_| {
            let c = [0, 1, 2].map(|_| rng.gen_range(-3.0..3.0));
            let s = [0, 1, 2].map(|_| rng.gen_range(0.5..2.0));
            Box3D::new(c, s, rng.gen_range(-3.0..3.0))
        })
        .collect::<hvx_core::Result<_>>()?;
    let n = rng.gen_range(3..10);
    let centers: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-3.0..3.0))).collect();
    let offsets: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let mut assigned: Vec<Option<usize>> = (0..n)
        .map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..nb)))
        .collect();
    assigned[0] = Some(0);
    let out = center_vote_loss(&VoteOutput::new(centers.clone(), offsets.clone())?, &assigned, &boxes)?;
    let x: Vec<f64> = offsets.iter().flatten().copied().collect();
    let g: Vec<f64> = out.grad.iter().flatten().copied().collect();
    let f = |v: &[f64]| {
        let offs = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        VoteOutput::new(centers.clone(), offs)
            .and_then(|votes| center_vote_loss(&votes, &assigned, &boxes))
            .map(|l| l.loss)
            .unwrap_or(f64::NAN)
    };
    grad_check(f, &x, &g, STEP, TOL)
}

pub fn check_triplet(seed: u64, config: &Config) -> hvx_core::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let margin = config.margin;
    let (centers, coords, features) = loop {
        let n = rng.gen_range(3..8);
        let coords: Vec<[i32; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-20..20))).collect();
        let mut uniq = coords.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != n {
            continue;
        }
        let centers: Vec<[f64; 3]> = coords.iter().map(|c| c.map(|v| (v as f64 + 0.5) * 0.2)).collect();
        let features = uniform_rows(&mut rng, n, dim, 1.0);
        let out = triplet_loss(&centers, &coords, &features, margin)?;
        if out.margins.iter().all(|m| m.abs() > KINK_GAP) {
            break (centers, coords, features);
        }
    };
    let out = triplet_loss(&centers, &coords, &features, margin)?;
    let f = |v: &[f64]| {
        let rows = FeatureRows::from_flat(dim, v.to_vec()).expect("shape");
        triplet_loss(&centers, &coords, &rows, margin)
            .map(|l| l.loss)
            .unwrap_or(f64::NAN)
    };
    grad_check(f, features.as_slice(), out.grad.as_slice(), STEP, TOL)
}

pub fn run_check(op: Op, seed: u64, config: &Config) -> hvx_core::Result<GradCheckReport> {
    match op {
        Op::Distill => check_distill(seed, config),
        Op::Fusion => check_fusion(seed, config),
        Op::Focal => check_focal(seed, config),
        Op::Vote => check_vote(seed, config),
        Op::Triplet => check_triplet(seed, config),
    }
}

/// Outcome of one operation across all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSummary {
    pub op: Op,
    pub trials: usize,
    pub passed: usize,
    pub worst_rel_err: f64,
    pub worst_seed: u64,
}

impl OpSummary {
    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }
}

pub fn summarize(op: Op, seeds: impl IntoIterator<Item = u64>, config: &Config) -> hvx_core::Result<OpSummary> {
    let mut s = OpSummary {
        op,
        trials: 0,
        passed: 0,
        worst_rel_err: 0.0,
        worst_seed: 0,
    };
    for seed in seeds {
        let r = run_check(op, seed, config)?;
        s.trials += 1;
        if r.passed() {
            s.passed += 1;
        }
        if r.max_rel_err >= s.worst_rel_err {
            s.worst_rel_err = r.max_rel_err;
            s.worst_seed = seed;
        }
    }
    Ok(s)
}
