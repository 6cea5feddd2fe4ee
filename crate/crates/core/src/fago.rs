//! Auxiliary geometry losses on the optimised voxel space: box labels,
//! focal importance loss, top-K filtering, centre voting, triplet
//! clustering and the residual merge back into the main stream.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureRows;
use crate::voxgrid::{Coord, SparseVoxelGrid};

/// Scores are clamped into `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before the log.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Oriented box; `yaw` rotates about the vertical (+z) axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxFile", into = "BoxFile")]
pub struct Box3D {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

impl TryFrom<BoxFile> for Box3D {
    type Error = Error;

    fn try_from(f: BoxFile) -> Result<Self> {
        Box3D::new(f.center, f.size, f.yaw)
    }
}

impl From<Box3D> for BoxFile {
    fn from(b: Box3D) -> Self {
        BoxFile {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
        }
    }
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if center.iter().chain(&size).any(|v| !v.is_finite()) || !yaw.is_finite() {
            return Err(Error::non_finite("box parameters"));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "box extents must be positive, got {size:?}"
            )));
        }
        if !(yaw > -PI && yaw <= PI) {
            return Err(Error::InvalidParameter(format!(
                "box yaw must lie in (-pi, pi], got {yaw}"
            )));
        }
        Ok(Self { center, size, yaw })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// World point expressed in the box frame (rotated by `-yaw`).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Box-frame point expressed in the world frame.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * q[0] - s * q[1],
            self.center[1] + s * q[0] + c * q[1],
            self.center[2] + q[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        (0..3).all(|a| q[a].abs() <= self.size[a] / 2.0)
    }

    /// The eight corners, `x` slowest.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let sx = if i & 4 != 0 { 0.5 } else { -0.5 };
            let sy = if i & 2 != 0 { 0.5 } else { -0.5 };
            let sz = if i & 1 != 0 { 0.5 } else { -0.5 };
            *o = self.to_world([sx * self.size[0], sy * self.size[1], sz * self.size[2]]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxLabels {
    pub labels: Vec<bool>,
    /// Smallest-volume containing box (lowest index on equal volume).
    pub assigned: Vec<Option<usize>>,
}

pub fn label_points(points: &[[f64; 3]], boxes: &[Box3D]) -> BoxLabels {
    let assigned: Vec<Option<usize>> = points
        .par_iter()
        .map(|&p| {
            let mut best: Option<usize> = None;
            for (bi, b) in boxes.iter().enumerate() {
                if b.contains(p) && best.is_none_or(|k| b.volume() < boxes[k].volume()) {
                    best = Some(bi);
                }
            }
            best
        })
        .collect();
    BoxLabels {
        labels: assigned.iter().map(Option::is_some).collect(),
        assigned,
    }
}

/// Labels each voxel by whether its center falls in any box.
pub fn label_foreground(grid: &SparseVoxelGrid, boxes: &[Box3D]) -> BoxLabels {
    label_points(&grid.centers(), boxes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    /// Exponent on `(1 - s)`; 1 gives the linear modulation.
    pub gamma: f64,
    pub batch_size: usize,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 1.0,
            batch_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `-(1/B)(1/M) Σ α (1-s_i)^γ log s_i` with `s_i = p_i` on positives and
/// `1 - p_i` on negatives. Gradient is w.r.t. the raw scores `p_i`
/// (zero where the clamp is active).
pub fn focal_importance_loss(scores: &[f64], labels: &[bool], params: &FocalParams) -> Result<LossGrad> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "focal scores vs labels",
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    if !(params.alpha.is_finite() && params.gamma.is_finite() && params.gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "invalid focal parameters alpha={} gamma={}",
            params.alpha, params.gamma
        )));
    }
    let m = scores.len();
    if m == 0 {
        return Ok(LossGrad {
            loss: 0.0,
            grad: Vec::new(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::non_finite("importance scores"));
    }
    let norm = 1.0 / (params.batch_size as f64 * m as f64);
    let (a, g) = (params.alpha, params.gamma);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(m);
    for (&p, &pos) in scores.iter().zip(labels) {
        let clamped = p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let s = if pos { clamped } else { 1.0 - clamped };
        let q = 1.0 - s;
        let ln = s.ln();
        loss -= a * q.powf(g) * ln;
        // d/ds of -α q^γ ln s
        let d_ds = if g == 0.0 {
            -a / s
        } else {
            -a * (-g * q.powf(g - 1.0) * ln + q.powf(g) / s)
        };
        let inside = p == clamped;
        let ds_dp = if !inside {
            0.0
        } else if pos {
            1.0
        } else {
            -1.0
        };
        grad.push(norm * d_ds * ds_dp);
    }
    Ok(LossGrad {
        loss: norm * loss,
        grad,
    })
}

#[derive(Debug, Clone)]
pub struct TopK {
    /// Source rows, descending score.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Selected voxels in descending-score order.
    pub grid: SparseVoxelGrid,
}

/// Descending score, then lexicographically smaller coordinate.
fn rank_order(scores: &[f64], coords: &[Coord], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then_with(|| coords[a].cmp(&coords[b]))
}

pub fn topk_filter(grid: &SparseVoxelGrid, scores: &[f64], k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    if scores.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            context: "top-K scores",
            expected: grid.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::non_finite("top-K scores"));
    }
    let coords = grid.coords();
    let mut order: Vec<usize> = (0..grid.len()).collect();
    let keep = k.min(order.len());
    if keep < order.len() {
        order.select_nth_unstable_by(keep, |&a, &b| rank_order(scores, coords, a, b));
        order.truncate(keep);
    }
    order.sort_unstable_by(|&a, &b| rank_order(scores, coords, a, b));
    Ok(TopK {
        scores: order.iter().map(|&i| scores[i]).collect(),
        grid: grid.select(&order),
        indices: order,
    })
}

/// Per-voxel offset prediction and the resulting voted centers.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutput {
    pub centers: Vec<[f64; 3]>,
    pub offsets: Vec<[f64; 3]>,
}

impl VoteOutput {
    pub fn new(centers: Vec<[f64; 3]>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        if centers.len() != offsets.len() {
            return Err(Error::DimensionMismatch {
                context: "vote centers vs offsets",
                expected: centers.len(),
                actual: offsets.len(),
            });
        }
        if centers.iter().chain(&offsets).flatten().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("vote output"));
        }
        Ok(Self { centers, offsets })
    }

    pub fn voted(&self, i: usize) -> [f64; 3] {
        let (c, o) = (self.centers[i], self.offsets[i]);
        [c[0] + o[0], c[1] + o[1], c[2] + o[2]]
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteLoss {
    pub loss: f64,
    /// Gradient w.r.t. each offset.
    pub grad: Vec<[f64; 3]>,
    pub contributing: usize,
}

/// `Σ ‖c_i + idx_i − c_gt‖²` over voxels that have an assigned box.
pub fn center_vote_loss(
    votes: &VoteOutput,
    assignments: &[Option<usize>],
    boxes: &[Box3D],
) -> Result<VoteLoss> {
    if assignments.len() != votes.len() {
        return Err(Error::DimensionMismatch {
            context: "vote assignments",
            expected: votes.len(),
            actual: assignments.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; votes.len()];
    let mut contributing = 0;
    for (i, a) in assignments.iter().enumerate() {
        let Some(bi) = *a else { continue };
        let b = boxes.get(bi).ok_or_else(|| {
            Error::InvalidParameter(format!("voxel {i} assigned to missing box {bi}"))
        })?;
        let p = votes.voted(i);
        let c = b.center();
        for ax in 0..3 {
            let d = p[ax] - c[ax];
            loss += d * d;
            grad[i][ax] = 2.0 * d;
        }
        contributing += 1;
    }
    Ok(VoteLoss {
        loss,
        grad,
        contributing,
    })
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// For each anchor: the nearest other voxel (positive) and the farthest
/// voxel distinct from both (negative), by center distance, ties going
/// to the lexicographically smaller coordinate. Needs ≥ 3 voxels.
pub fn triplet_pairs(centers: &[[f64; 3]], coords: &[Coord]) -> Vec<(usize, usize)> {
    let n = centers.len();
    if n < 3 {
        return Vec::new();
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut pos: Option<(f64, usize)> = None;
            for j in (0..n).filter(|&j| j != i) {
                let d = dist2(centers[i], centers[j]);
                let better = match pos {
                    None => true,
                    Some((bd, bj)) => d < bd || (d == bd && coords[j] < coords[bj]),
                };
                if better {
                    pos = Some((d, j));
                }
            }
            let pj = pos.expect("n >= 3").1;
            let mut neg: Option<(f64, usize)> = None;
            for t in (0..n).filter(|&t| t != i && t != pj) {
                let d = dist2(centers[i], centers[t]);
                let better = match neg {
                    None => true,
                    Some((bd, bt)) => d > bd || (d == bd && coords[t] < coords[bt]),
                };
                if better {
                    neg = Some((d, t));
                }
            }
            (pj, neg.expect("n >= 3").1)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad: FeatureRows,
    /// `(positive, negative)` per anchor.
    pub pairs: Vec<(usize, usize)>,
    /// Pre-hinge value per anchor.
    pub margins: Vec<f64>,
}

/// `Σ_i max(‖f_i − f_j‖² − ‖f_i − f_t‖² + margin, 0)` with spatially
/// chosen pairs. Pairing is fixed before differentiation.
pub fn triplet_loss(
    centers: &[[f64; 3]],
    coords: &[Coord],
    features: &FeatureRows,
    margin: f64,
) -> Result<TripletLoss> {
    if centers.len() != features.len() || coords.len() != features.len() {
        return Err(Error::DimensionMismatch {
            context: "triplet centers vs features",
            expected: features.len(),
            actual: centers.len(),
        });
    }
    if !margin.is_finite() {
        return Err(Error::non_finite("triplet margin"));
    }
    let pairs = triplet_pairs(centers, coords);
    let mut grad = FeatureRows::zeros(features.len(), features.dim());
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(pairs.len());
    for (i, &(j, t)) in pairs.iter().enumerate() {
        let (fi, fj, ft) = (features.row(i), features.row(j), features.row(t));
        let dp: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
        let dn: f64 = fi.iter().zip(ft).map(|(a, b)| (a - b) * (a - b)).sum();
        let pre = dp - dn + margin;
        margins.push(pre);
        if pre <= 0.0 {
            continue;
        }
        loss += pre;
        let d = features.dim();
        let (vi, vj, vt) = (fi.to_vec(), fj.to_vec(), ft.to_vec());
        for k in 0..d {
            grad.row_mut(i)[k] += 2.0 * (vt[k] - vj[k]);
            grad.row_mut(j)[k] -= 2.0 * (vi[k] - vj[k]);
            grad.row_mut(t)[k] += 2.0 * (vi[k] - vt[k]);
        }
    }
    Ok(TripletLoss {
        loss,
        grad,
        pairs,
        margins,
    })
}

/// Triplet loss on a filtered grid's own features.
pub fn triplet_cluster_loss(filtered: &SparseVoxelGrid, margin: f64) -> Result<TripletLoss> {
    triplet_loss(&filtered.centers(), filtered.coords(), filtered.features(), margin)
}

/// Adds voted features onto the matching cells of the original grid.
pub fn residual_merge(voted: &SparseVoxelGrid, original: &SparseVoxelGrid) -> Result<SparseVoxelGrid> {
    if !voted.same_lattice(original) || voted.stride() != original.stride() {
        return Err(Error::Grid("residual merge requires a shared lattice".into()));
    }
    if voted.is_empty() {
        return Ok(original.clone());
    }
    if voted.dim() != original.dim() {
        return Err(Error::DimensionMismatch {
            context: "residual merge feature dimension",
            expected: original.dim(),
            actual: voted.dim(),
        });
    }
    let index = original.index();
    let mut features = original.features().clone();
    for (i, &c) in voted.coords().iter().enumerate() {
        let key = crate::voxgrid::pack_coord(c)?;
        let row = *index.get(&key).ok_or_else(|| {
            Error::Grid(format!("voted coordinate {c:?} is not in the original grid"))
        })?;
        for (a, b) in features.row_mut(row).iter_mut().zip(voted.features().row(i)) {
            *a += b;
        }
    }
    original.with_features(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn unit_box() -> Box3D {
        Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap()
    }

    fn grid(coords: &[Coord], feats: &[&[f64]]) -> SparseVoxelGrid {
        SparseVoxelGrid::new(1, 1.0, [0.0; 3], coords.to_vec(), FeatureRows::from_rows(feats).unwrap()).unwrap()
    }

    #[test]
    fn box_validation() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], -PI).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], PI).is_ok());
        let json = r#"[{"center":[1,2,3],"size":[1,1,1],"yaw":0.5}]"#;
        let b: Vec<Box3D> = serde_json::from_str(json).unwrap();
        assert_eq!(b[0].center(), [1.0, 2.0, 3.0]);
        assert!(serde_json::from_str::<Vec<Box3D>>(r#"[{"center":[0,0,0],"size":[-1,1,1],"yaw":0}]"#).is_err());
    }

    #[test]
    fn containment_examples() {
        assert!(unit_box().contains([0.0; 3]));
        assert!(!unit_box().contains([5.0; 3]));
        let b = Box3D::new([0.0; 3], [2.0, 1.0, 1.0], FRAC_PI_2).unwrap();
        // long axis now along world y
        assert!(b.contains([0.0, 0.9, 0.0]));
        assert!(!b.contains([0.9, 0.0, 0.0]));
    }

    #[test]
    fn smallest_box_wins() {
        let big = Box3D::new([0.0; 3], [4.0; 3], 0.0).unwrap();
        let small = Box3D::new([0.5, 0.0, 0.0], [1.0; 3], 0.3).unwrap();
        let l = label_points(&[[0.5, 0.0, 0.0], [1.5, 0.0, 0.0], [9.0, 0.0, 0.0]], &[big, small]);
        assert_eq!(l.assigned, vec![Some(1), Some(0), None]);
        assert_eq!(l.labels, vec![true, true, false]);
    }

    #[test]
    fn corners_lie_on_box() {
        let b = Box3D::new([1.0, -2.0, 0.5], [2.0, 1.0, 3.0], 0.7).unwrap();
        for c in b.corners() {
            let q = b.to_local(c);
            for a in 0..3 {
                assert!((q[a].abs() - b.size()[a] / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn focal_scalar_example() {
        let l = focal_importance_loss(&[0.5], &[true], &FocalParams::default()).unwrap();
        assert!((l.loss - (-0.25 * 0.5 * 0.5f64.ln())).abs() < 1e-15);
        assert!((l.loss - 0.086_643_397_569_993_2).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_scores_vanish() {
        let l = focal_importance_loss(&[1.0, 0.0, 1.0 - 1e-12], &[true, false, true], &FocalParams::default()).unwrap();
        assert!(l.loss < 1e-12);
        assert_eq!(l.grad[0], 0.0);
        assert_eq!(l.grad[1], 0.0);
    }

    #[test]
    fn focal_edge_cases() {
        let p = FocalParams::default();
        let e = focal_importance_loss(&[], &[], &p).unwrap();
        assert_eq!(e.loss, 0.0);
        assert!(focal_importance_loss(&[0.5], &[], &p).is_err());
        let bad = FocalParams { batch_size: 0, ..p };
        assert!(focal_importance_loss(&[0.5], &[true], &bad).is_err());
    }

    #[test]
    fn focal_decreases_with_positive_score() {
        let p = FocalParams::default();
        let mut prev = f64::INFINITY;
        for k in 1..100 {
            let s = k as f64 / 100.0;
            let l = focal_importance_loss(&[s, 0.3], &[true, false], &p).unwrap().loss;
            assert!(l < prev);
            assert!(l >= 0.0);
            prev = l;
        }
    }

    #[test]
    fn topk_examples() {
        let g = grid(&[[0, 0, 0], [1, 0, 0], [2, 0, 0]], &[&[0.0], &[1.0], &[2.0]]);
        let t = topk_filter(&g, &[0.9, 0.1, 0.5], 2).unwrap();
        assert_eq!(t.indices, vec![0, 2]);
        assert_eq!(t.grid.coords(), &[[0, 0, 0], [2, 0, 0]]);

        let all = topk_filter(&g, &[0.9, 0.1, 0.5], 10).unwrap();
        assert_eq!(all.indices, vec![0, 2, 1]);

        let g2 = grid(&[[3, 0, 0], [1, 5, 0], [1, 0, 0]], &[&[0.0], &[1.0], &[2.0]]);
        let tie = topk_filter(&g2, &[0.4, 0.4, 0.4], 2).unwrap();
        assert_eq!(tie.grid.coords(), &[[1, 0, 0], [1, 5, 0]]);

        assert!(topk_filter(&g, &[0.1, 0.2, 0.3], 0).is_err());
        assert!(topk_filter(&g, &[0.1], 1).is_err());
    }

    #[test]
    fn vote_examples() {
        let b = vec![Box3D::new([1.5, 1.0, 1.0], [1.0; 3], 0.0).unwrap()];
        let v = VoteOutput::new(vec![[1.0; 3]], vec![[0.5, 0.0, 0.0]]).unwrap();
        let l = center_vote_loss(&v, &[Some(0)], &b).unwrap();
        assert_eq!(l.loss, 0.0);

        let b = vec![Box3D::new([1.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap()];
        let v = VoteOutput::new(vec![[0.0; 3], [7.0; 3]], vec![[0.0; 3], [1.0; 3]]).unwrap();
        let l = center_vote_loss(&v, &[Some(0), None], &b).unwrap();
        assert_eq!(l.loss, 1.0);
        assert_eq!(l.grad, vec![[-2.0, 0.0, 0.0], [0.0; 3]]);
        assert_eq!(l.contributing, 1);

        let none = center_vote_loss(&v, &[None, None], &b).unwrap();
        assert_eq!(none.loss, 0.0);
        assert!(center_vote_loss(&v, &[Some(3), None], &b).is_err());
    }

    #[test]
    fn triplet_examples() {
        // anchor 0 at origin, positive 1 next to it, negative 2 far away
        let g = grid(&[[0, 0, 0], [1, 0, 0], [5, 0, 0]], &[&[0.0, 0.0], &[1.0, 0.0], &[3.0, 0.0]]);
        let l = triplet_cluster_loss(&g, 1.0).unwrap();
        assert_eq!(l.pairs[0], (1, 2));
        assert_eq!(l.margins[0], 1.0 - 9.0 + 1.0);

        let same = grid(&[[0, 0, 0], [1, 0, 0], [5, 0, 0], [0, 3, 0]], &[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let l = triplet_cluster_loss(&same, 0.7).unwrap();
        assert!((l.loss - 4.0 * 0.7).abs() < 1e-15);
        assert!(l.grad.as_slice().iter().all(|v| *v == 0.0));

        let two = grid(&[[0, 0, 0], [1, 0, 0]], &[&[0.0], &[1.0]]);
        assert_eq!(triplet_cluster_loss(&two, 1.0).unwrap().loss, 0.0);
    }

    #[test]
    fn triplet_negative_distinct_from_positive() {
        // equilateral-ish tie: both others equidistant from the anchor
        let g = grid(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]], &[&[0.0], &[1.0], &[2.0]]);
        let l = triplet_cluster_loss(&g, 1.0).unwrap();
        for (i, &(j, t)) in l.pairs.iter().enumerate() {
            assert!(i != j && i != t && j != t);
        }
        assert_eq!(l.pairs[0], (2, 1));
    }

    #[test]
    fn residual_merge_examples() {
        let orig = grid(&[[0, 0, 0], [1, 0, 0]], &[&[1.0, 2.0], &[0.0, 0.0]]);
        let empty = SparseVoxelGrid::empty(1, 1.0, [0.0; 3], 2).unwrap();
        assert_eq!(residual_merge(&empty, &orig).unwrap(), orig);
        let v = grid(&[[0, 0, 0]], &[&[3.0, 4.0]]);
        let m = residual_merge(&v, &orig).unwrap();
        assert_eq!(m.features().row(0), &[4.0, 6.0]);
        assert_eq!(m.features().row(1), &[0.0, 0.0]);
        let stray = grid(&[[9, 0, 0]], &[&[3.0, 4.0]]);
        assert!(residual_merge(&stray, &orig).is_err());
    }
}
