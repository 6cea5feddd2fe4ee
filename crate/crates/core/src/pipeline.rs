//! End-to-end forward and reverse pass over a scene.
//!
//! The geometric front half (voxelize, SGVO, projection, gather, box
//! labels) does not depend on learned parameters and is computed once in
//! [`Pipeline::prepare`]. [`Pipeline::evaluate`] then runs the learned
//! half for a given [`Model`] and optionally returns the gradient of the
//! weighted auxiliary objective with respect to every MLP parameter.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageContext};
use crate::fago::{
    center_vote_loss, focal_importance_loss, label_foreground, residual_merge, topk_filter,
    triplet_loss, BoxLabels, LossGrad, TopK, TripletLoss, VoteLoss, VoteOutput,
};
use crate::features::FeatureRows;
use crate::fusion::{fuse, fuse_backward, gather_image_features, Activation, FuseForward, GatheredFeatures, MlpParams, MlpTrace};
use crate::hyperball::{hyperbolic_distill_loss, PoincareBall};
use crate::objective::{combine_losses, Config, Eta, LossBundle, LossParts};
use crate::scenegen::SyntheticScene;
use crate::voxgrid::{run_sgvo, voxelize, SgvoOutput, SparseVoxelGrid, VoxelParams};

/// Wall-clock milliseconds per stage, summed over strides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings(pub BTreeMap<String, f64>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64() * 1e3;
        out
    }

    pub fn merge(&mut self, other: &Timings) {
        for (k, v) in &other.0 {
            *self.0.entry(k.clone()).or_insert(0.0) += v;
        }
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

/// Learned parameters. `student` maps raw voxel features to the voxel
/// feature stream that every auxiliary head consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub student: MlpParams,
    pub fuse: MlpParams,
    pub gate: MlpParams,
    pub importance: MlpParams,
    pub offset: MlpParams,
}

impl Model {
    pub fn init(d_vox: usize, d_img: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            student: MlpParams::two_layer(d_vox, hidden, d_img, Activation::None, &mut rng)?,
            fuse: MlpParams::two_layer(2 * d_img, hidden, d_img, Activation::None, &mut rng)?,
            gate: MlpParams::two_layer(d_img, hidden, d_img, Activation::None, &mut rng)?,
            importance: MlpParams::two_layer(d_img, hidden, 1, Activation::Sigmoid, &mut rng)?,
            offset: MlpParams::two_layer(d_img, hidden, 3, Activation::None, &mut rng)?,
        })
    }

    fn parts(&self) -> [&MlpParams; 5] {
        [&self.student, &self.fuse, &self.gate, &self.importance, &self.offset]
    }

    fn parts_mut(&mut self) -> [&mut MlpParams; 5] {
        [
            &mut self.student,
            &mut self.fuse,
            &mut self.gate,
            &mut self.importance,
            &mut self.offset,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|m| m.num_params()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            student: self.student.zeros_like(),
            fuse: self.fuse.zeros_like(),
            gate: self.gate.zeros_like(),
            importance: self.importance.zeros_like(),
            offset: self.offset.zeros_like(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|m| m.to_flat()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "model parameter vector",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for m in self.parts_mut() {
            let n = m.num_params();
            m.set_flat(&flat[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            a.axpy(alpha, b);
        }
    }
}

/// Voxel counts at each stage for one stride.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stride: u32,
    pub points: usize,
    pub input: usize,
    pub foreground: usize,
    pub background: usize,
    pub densified: usize,
    pub sparsified: usize,
    pub merged: usize,
    /// Merged voxels with a valid image projection.
    pub projected: usize,
    /// Merged voxels whose center lies in a box.
    pub labeled_foreground: usize,
    pub filtered: usize,
    pub output: usize,
}

/// Parameter-free per-stride state.
#[derive(Debug, Clone)]
pub struct PreparedStride {
    pub stride: u32,
    pub input: SparseVoxelGrid,
    pub sgvo: SgvoOutput,
    pub gathered: GatheredFeatures,
    /// Rows of `sgvo.merged` with a valid projection.
    pub valid_rows: Vec<usize>,
    pub labels: BoxLabels,
}

impl PreparedStride {
    pub fn merged(&self) -> &SparseVoxelGrid {
        &self.sgvo.merged
    }
}

#[derive(Debug, Clone)]
pub struct StrideEval {
    pub stride: u32,
    pub student: MlpTrace,
    pub fusion: FuseForward,
    pub distill: f64,
    distill_grad_teacher: FeatureRows,
    distill_grad_student: FeatureRows,
    pub importance: MlpTrace,
    pub focal: LossGrad,
    pub topk: TopK,
    pub offset: MlpTrace,
    pub votes: VoteOutput,
    pub vote: VoteLoss,
    pub triplet: TripletLoss,
    /// Filtered voxels with their student features, sorted.
    pub voted: SparseVoxelGrid,
    /// Residual-merged output stream.
    pub output: SparseVoxelGrid,
}

impl StrideEval {
    pub fn scores(&self) -> Vec<f64> {
        self.importance.output().iter().map(|r| r[0]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub bundle: LossBundle,
    pub strides: Vec<StrideEval>,
    pub grad: Option<Model>,
    pub timings: Timings,
}

pub struct Pipeline<'a> {
    scene: &'a SyntheticScene,
    config: Config,
    ball: PoincareBall,
    eta: Eta,
    strides: Vec<PreparedStride>,
    timings: Timings,
}

fn scatter_add(dst: &mut FeatureRows, rows: &[usize], src: &FeatureRows) {
    for (k, &r) in rows.iter().enumerate() {
        for (a, b) in dst.row_mut(r).iter_mut().zip(src.row(k)) {
            *a += b;
        }
    }
}

fn scaled(rows: &FeatureRows, c: f64) -> FeatureRows {
    let data = rows.as_slice().iter().map(|v| v * c).collect();
    FeatureRows::from_flat(rows.dim(), data).expect("same shape")
}

impl<'a> Pipeline<'a> {
    pub fn prepare(scene: &'a SyntheticScene, config: &Config) -> Result<Self> {
        config.validate().stage("config")?;
        let ball = config.ball().stage("config")?;
        let eta = config.eta();
        if scene.point_features.len() != scene.points.len() && !scene.points.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "scene point features",
                expected: scene.points.len(),
                actual: scene.point_features.len(),
            })
            .stage("voxelize");
        }
        let mut timings = Timings::default();
        let mut strides = Vec::with_capacity(config.strides.len());
        for &stride in &config.strides {
            let params = VoxelParams::new(config.voxel_size, [0.0; 3], stride);
            let input = timings
                .time("voxelize", || voxelize(&scene.points, Some(&scene.point_features), &params))
                .stage("voxelize")?;
            let sgvo = timings
                .time("sgvo", || run_sgvo(&input, &scene.mask, &scene.camera, config.sigma_s))
                .stage("sgvo")?;
            let gathered = timings.time("gather", || {
                gather_image_features(&sgvo.merged, &scene.feature_map, &scene.camera)
            });
            let valid_rows = (0..gathered.valid.len()).filter(|&i| gathered.valid[i]).collect();
            let labels = timings.time("label", || label_foreground(&sgvo.merged, &scene.boxes));
            strides.push(PreparedStride {
                stride,
                input,
                sgvo,
                gathered,
                valid_rows,
                labels,
            });
        }
        Ok(Self {
            scene,
            config: config.clone(),
            ball,
            eta,
            strides,
            timings,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn strides(&self) -> &[PreparedStride] {
        &self.strides
    }

    /// Timings of the parameter-free stages.
    pub fn prepare_timings(&self) -> &Timings {
        &self.timings
    }

    pub fn d_vox(&self) -> usize {
        self.scene.point_features.dim()
    }

    pub fn d_img(&self) -> usize {
        self.scene.feature_map.dim()
    }

    /// Randomly initialized model, seeded by the config.
    pub fn init_model(&self) -> Result<Model> {
        let d_img = self.d_img();
        Model::init(self.d_vox(), d_img, self.config.hidden_width(d_img), self.config.seed)
    }

    fn eval_stride(&self, model: &Model, p: &PreparedStride, t: &mut Timings) -> Result<StrideEval> {
        let merged = p.merged();
        let student = t
            .time("student", || model.student.forward(merged.features()))
            .stage("student")?;
        let f_vox = student.output();

        let image = p.gathered.features.select(&p.valid_rows);
        let voxel = f_vox.select(&p.valid_rows);
        let fusion = t
            .time("fuse", || fuse(&image, &voxel, &model.fuse, &model.gate))
            .stage("fuse")?;
        let distill = t
            .time("distill", || {
                hyperbolic_distill_loss(
                    std::slice::from_ref(&fusion.output),
                    std::slice::from_ref(&voxel),
                    &self.ball,
                )
            })
            .stage("distill")?;

        let importance = t
            .time("importance", || model.importance.forward(f_vox))
            .stage("importance")?;
        let scores: Vec<f64> = importance.output().iter().map(|r| r[0]).collect();
        let focal = t
            .time("focal", || focal_importance_loss(&scores, &p.labels.labels, &self.config.focal()))
            .stage("focal")?;
        let topk = t
            .time("topk", || topk_filter(merged, &scores, self.config.top_k))
            .stage("topk")?;

        let f_filter = f_vox.select(&topk.indices);
        let offset = t
            .time("vote", || model.offset.forward(&f_filter))
            .stage("vote")?;
        let centers = topk.grid.centers();
        let offsets = offset.output().iter().map(|r| [r[0], r[1], r[2]]).collect();
        let votes = VoteOutput::new(centers.clone(), offsets).stage("vote")?;
        let assigned: Vec<Option<usize>> = topk.indices.iter().map(|&i| p.labels.assigned[i]).collect();
        let vote = t
            .time("vote", || center_vote_loss(&votes, &assigned, &self.scene.boxes))
            .stage("vote")?;
        let triplet = t
            .time("triplet", || {
                triplet_loss(&centers, topk.grid.coords(), &f_filter, self.config.margin)
            })
            .stage("triplet")?;

        let (voted, output) = t
            .time("residual", || -> Result<_> {
                let voted = topk.grid.with_features(f_filter.clone())?.sorted();
                let base = if self.config.prune {
                    voted.clone()
                } else {
                    merged.with_features(f_vox.clone())?
                };
                let output = residual_merge(&voted, &base)?;
                Ok((voted, output))
            })
            .stage("residual")?;

        let mut gt = distill.grad_teacher;
        let mut gs = distill.grad_student;
        Ok(StrideEval {
            stride: p.stride,
            student,
            fusion,
            distill: distill.loss,
            distill_grad_teacher: gt.pop().unwrap_or_else(|| FeatureRows::new(0)),
            distill_grad_student: gs.pop().unwrap_or_else(|| FeatureRows::new(0)),
            importance,
            focal,
            topk,
            offset,
            votes,
            vote,
            triplet,
            voted,
            output,
        })
    }

    fn backward_stride(&self, model: &Model, e: &StrideEval, p: &PreparedStride, grad: &mut Model) -> Result<()> {
        let [e1, e2, e3, e4] = self.eta.0;
        let f_vox = e.student.output();
        let mut d_vox = FeatureRows::zeros(f_vox.len(), f_vox.dim());

        if !p.valid_rows.is_empty() {
            scatter_add(&mut d_vox, &p.valid_rows, &scaled(&e.distill_grad_student, e1));
            if !self.config.detach_teacher {
                let g = fuse_backward(&e.fusion, &model.fuse, &model.gate, &scaled(&e.distill_grad_teacher, e1))?;
                scatter_add(&mut d_vox, &p.valid_rows, &g.voxel);
                grad.fuse.axpy(1.0, &g.fuse_mlp);
                grad.gate.axpy(1.0, &g.gate_mlp);
            }
        }

        let d_scores = FeatureRows::from_flat(1, e.focal.grad.iter().map(|g| g * e2).collect())?;
        let (d_in, g_imp) = model.importance.backward(&e.importance, &d_scores)?;
        for (a, b) in d_vox.as_mut_slice().iter_mut().zip(d_in.as_slice()) {
            *a += b;
        }
        grad.importance.axpy(1.0, &g_imp);

        let d_off = FeatureRows::from_flat(3, e.vote.grad.iter().flat_map(|g| g.map(|v| v * e3)).collect())?;
        let (d_filter, g_off) = model.offset.backward(&e.offset, &d_off)?;
        grad.offset.axpy(1.0, &g_off);
        scatter_add(&mut d_vox, &e.topk.indices, &d_filter);
        scatter_add(&mut d_vox, &e.topk.indices, &scaled(&e.triplet.grad, e4));

        let (_, g_student) = model.student.backward(&e.student, &d_vox)?;
        grad.student.axpy(1.0, &g_student);
        Ok(())
    }

    pub fn evaluate(&self, model: &Model, with_grad: bool) -> Result<Evaluation> {
        let mut timings = Timings::default();
        let mut strides = Vec::with_capacity(self.strides.len());
        for p in &self.strides {
            strides.push(self.eval_stride(model, p, &mut timings)?);
        }
        let ext = self.config.external;
        let parts = LossParts {
            l_cls: ext.l_cls,
            l_het: ext.l_het,
            l_reg: ext.l_reg,
            l_h: strides.iter().map(|s| s.distill).sum(),
            l_s: strides.iter().map(|s| s.focal.loss).sum(),
            l_ctr: strides.iter().map(|s| s.vote.loss).sum(),
            l_cluster: strides.iter().map(|s| s.triplet.loss).sum(),
        };
        let bundle = timings
            .time("combine", || combine_losses(&parts, self.eta))
            .stage("combine")?;
        let grad = if with_grad {
            let mut g = model.zeros_like();
            timings
                .time("backward", || -> Result<()> {
                    for (e, p) in strides.iter().zip(&self.strides) {
                        self.backward_stride(model, e, p, &mut g)?;
                    }
                    Ok(())
                })
                .stage("backward")?;
            Some(g)
        } else {
            None
        };
        Ok(Evaluation {
            bundle,
            strides,
            grad,
            timings,
        })
    }

    /// Weighted auxiliary objective at a flat parameter vector.
    pub fn objective_at(&self, template: &Model, flat: &[f64]) -> Result<f64> {
        let mut m = template.clone();
        m.set_flat(flat)?;
        Ok(self.evaluate(&m, false)?.bundle.total)
    }

    pub fn counts(&self, eval: &Evaluation) -> Vec<StageCounts> {
        self.strides
            .iter()
            .zip(&eval.strides)
            .map(|(p, e)| StageCounts {
                stride: p.stride,
                points: self.scene.points.len(),
                input: p.input.len(),
                foreground: p.sgvo.foreground.len(),
                background: p.sgvo.background.len(),
                densified: p.sgvo.densified.len(),
                sparsified: p.sgvo.sparsified.len(),
                merged: p.sgvo.merged.len(),
                projected: p.valid_rows.len(),
                labeled_foreground: p.labels.labels.iter().filter(|&&l| l).count(),
                filtered: e.topk.indices.len(),
                output: e.output.len(),
            })
            .collect()
    }
}

/// Fixed-step gradient descent on the auxiliary objective. Returns the
/// objective before every step and after the last one (`steps + 1` values).
pub fn gradient_descent(pipeline: &Pipeline, model: &mut Model, lr: f64, steps: usize) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let e = pipeline.evaluate(model, true)?;
        history.push(e.bundle.total);
        let g = e.grad.expect("requested");
        model.axpy(-lr, &g);
    }
    history.push(pipeline.evaluate(model, false)?.bundle.total);
    Ok(history)
}
