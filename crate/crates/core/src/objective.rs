//! Weighted objective, run configuration and the finite-difference
//! gradient checker used throughout the test suites.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fago::FocalParams;
use crate::hyperball::PoincareBall;

/// Fixed weight of the classification loss.
pub const W_CLS: f64 = 1.0;
/// Fixed weight of the heatmap loss.
pub const W_HET: f64 = 1.0;
/// Fixed weight of the regression loss.
pub const W_REG: f64 = 2.0;

/// Auxiliary loss weights `(η₁, η₂, η₃, η₄)` for
/// `(L_H, L_s, L_ctr, L_cluster)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eta(pub [f64; 4]);

impl Eta {
    /// Weights used for the reported training runs.
    pub const TRAINING_SETTING: Eta = Eta([2.0, 0.4, 0.8, 0.8]);
    /// Best setting found by the one-at-a-time weight sweep.
    pub const SWEEP_OPTIMUM: Eta = Eta([1.0, 0.4, 0.8, 0.8]);

    pub fn preset(name: &str) -> Option<Eta> {
        match name {
            "training-setting" => Some(Self::TRAINING_SETTING),
            "sweep-optimum" => Some(Self::SWEEP_OPTIMUM),
            _ => None,
        }
    }

    pub fn with(mut self, index: usize, value: f64) -> Self {
        self.0[index] = value;
        self
    }
}

impl Default for Eta {
    fn default() -> Self {
        Self::TRAINING_SETTING
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Cls,
    Het,
    Reg,
    Hyperbolic,
    Importance,
    CenterVote,
    Cluster,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Cls,
        LossTerm::Het,
        LossTerm::Reg,
        LossTerm::Hyperbolic,
        LossTerm::Importance,
        LossTerm::CenterVote,
        LossTerm::Cluster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Cls => "l_cls",
            LossTerm::Het => "l_het",
            LossTerm::Reg => "l_reg",
            LossTerm::Hyperbolic => "l_h",
            LossTerm::Importance => "l_s",
            LossTerm::CenterVote => "l_ctr",
            LossTerm::Cluster => "l_cluster",
        }
    }
}

/// Individual loss values. The detection-head terms are supplied from
/// outside and default to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(default)]
    pub l_cls: f64,
    #[serde(default)]
    pub l_het: f64,
    #[serde(default)]
    pub l_reg: f64,
    pub l_h: f64,
    pub l_s: f64,
    pub l_ctr: f64,
    pub l_cluster: f64,
}

impl LossParts {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Cls => self.l_cls,
            LossTerm::Het => self.l_het,
            LossTerm::Reg => self.l_reg,
            LossTerm::Hyperbolic => self.l_h,
            LossTerm::Importance => self.l_s,
            LossTerm::CenterVote => self.l_ctr,
            LossTerm::Cluster => self.l_cluster,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(flatten)]
    pub parts: LossParts,
    pub eta: Eta,
    pub total: f64,
}

impl LossBundle {
    pub fn coefficient(&self, term: LossTerm) -> f64 {
        coefficient(term, &self.eta)
    }

    /// Scales an upstream gradient of `term` into a gradient of the total.
    pub fn scale_grad(&self, term: LossTerm, grad: &mut [f64]) {
        let c = self.coefficient(term);
        grad.iter_mut().for_each(|g| *g *= c);
    }
}

pub fn coefficient(term: LossTerm, eta: &Eta) -> f64 {
    match term {
        LossTerm::Cls => W_CLS,
        LossTerm::Het => W_HET,
        LossTerm::Reg => W_REG,
        LossTerm::Hyperbolic => eta.0[0],
        LossTerm::Importance => eta.0[1],
        LossTerm::CenterVote => eta.0[2],
        LossTerm::Cluster => eta.0[3],
    }
}

/// `L_cls + L_het + 2 L_reg + η₁ L_H + η₂ L_s + η₃ L_ctr + η₄ L_cluster`.
pub fn combine_losses(parts: &LossParts, eta: Eta) -> Result<LossBundle> {
    for term in LossTerm::ALL {
        if !parts.get(term).is_finite() {
            return Err(Error::non_finite(format!("loss term {}", term.name())));
        }
    }
    if eta.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("loss weights eta"));
    }
    let total = LossTerm::ALL
        .iter()
        .map(|&t| coefficient(t, &eta) * parts.get(t))
        .sum();
    Ok(LossBundle {
        parts: *parts,
        eta,
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub failing: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn central_difference<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], i: usize, h: f64) -> Result<f64> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] = x[i] + h;
    xm[i] = x[i] - h;
    let (fp, fm) = (f(&xp), f(&xm));
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::GradCheck(format!(
            "non-finite evaluation at coordinate {i} (f(x+h)={fp}, f(x-h)={fm})"
        )));
    }
    // divide by the step actually taken
    Ok((fp - fm) / (xp[i] - xm[i]))
}

fn build_report(analytic: &[f64], numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let rel_err: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let failing = rel_err
        .iter()
        .enumerate()
        .filter(|(_, e)| !(**e < tol))
        .map(|(i, _)| i)
        .collect();
    GradCheckReport {
        analytic: analytic.to_vec(),
        max_rel_err: rel_err.iter().copied().fold(0.0, f64::max),
        numeric,
        rel_err,
        failing,
        tol,
    }
}

fn check_args(x: &[f64], analytic: &[f64], h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("step h must be > 0, got {h}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient check",
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    Ok(())
}

/// Compares `analytic` against central differences of `f` at `x`,
/// one coordinate at a time in index order.
pub fn grad_check<F: Fn(&[f64]) -> f64>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    check_args(x, analytic, h)?;
    let numeric = (0..x.len())
        .map(|i| central_difference(&f, x, i, h))
        .collect::<Result<Vec<f64>>>()?;
    Ok(build_report(analytic, numeric, tol))
}

/// As [`grad_check`], evaluating coordinates in parallel. `f` must be pure.
pub fn grad_check_par<F: Fn(&[f64]) -> f64 + Sync>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    check_args(x, analytic, h)?;
    let numeric = (0..x.len())
        .into_par_iter()
        .map(|i| central_difference(&f, x, i, h))
        .collect::<Result<Vec<f64>>>()?;
    Ok(build_report(analytic, numeric, tol))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Hidden width of every two-layer MLP; 0 means "use D_img".
    #[serde(default)]
    pub hidden: usize,
}

/// Loss weights given either explicitly or by preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSetting {
    Values([f64; 4]),
    Preset(String),
}

impl Default for EtaSetting {
    fn default() -> Self {
        EtaSetting::Preset("training-setting".into())
    }
}

impl EtaSetting {
    pub fn resolve(&self) -> Result<Eta> {
        match self {
            EtaSetting::Values(v) => Ok(Eta(*v)),
            EtaSetting::Preset(name) => Eta::preset(name).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown eta preset '{name}' (expected training-setting or sweep-optimum)"
                ))
            }),
        }
    }
}

/// Detection-head losses supplied from outside the library.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalLosses {
    pub l_cls: f64,
    pub l_het: f64,
    pub l_reg: f64,
}

/// Run configuration. Every field has a default, so `{}` is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub eta: EtaSetting,
    pub alpha: f64,
    pub gamma: f64,
    pub margin: f64,
    pub k_abs: f64,
    pub eps: f64,
    /// Background max-pool kernel = stride on every axis.
    pub sigma_s: u32,
    pub top_k: usize,
    pub mlp: MlpConfig,
    pub seed: u64,
    pub voxel_size: f64,
    pub strides: Vec<u32>,
    pub batch_size: usize,
    /// Treat the fused teacher features as constants in the distillation loss.
    pub detach_teacher: bool,
    /// Replace the main voxel stream by the filtered set before the merge.
    pub prune: bool,
    pub external: ExternalLosses,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            eta: EtaSetting::default(),
            alpha: 0.25,
            gamma: 1.0,
            margin: 1.0,
            k_abs: 1.0,
            eps: 1e-5,
            sigma_s: 2,
            top_k: 512,
            mlp: MlpConfig::default(),
            seed: 0,
            voxel_size: 0.2,
            strides: vec![1, 2],
            batch_size: 1,
            detach_teacher: true,
            prune: false,
            external: ExternalLosses::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.eta.resolve()?;
        self.ball()?;
        if self.sigma_s == 0 {
            return Err(Error::InvalidParameter("sigma_s must be >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidParameter("top_k must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.margin.is_finite()) {
            return Err(Error::InvalidParameter("alpha and margin must be finite".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParameter("gamma must be finite and >= 0".into()));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::InvalidParameter("voxel_size must be > 0".into()));
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(Error::InvalidParameter("strides must be a non-empty list of positive integers".into()));
        }
        let ext = self.external;
        if ![ext.l_cls, ext.l_het, ext.l_reg].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("external losses must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eta(&self) -> Eta {
        self.eta.resolve().unwrap_or_default()
    }

    pub fn ball(&self) -> Result<PoincareBall> {
        if !(self.k_abs.is_finite() && self.k_abs > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "k_abs (curvature magnitude) must be > 0, got {}",
                self.k_abs
            )));
        }
        PoincareBall::new(self.k_abs, self.eps)
    }

    /// Background pooling kernel size (= stride) per axis.
    pub fn pool_kernel(&self) -> [u32; 3] {
        [self.sigma_s; 3]
    }

    /// `σ = 1/s`.
    pub fn sigma(&self) -> f64 {
        1.0 / self.sigma_s as f64
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.alpha,
            gamma: self.gamma,
            batch_size: self.batch_size,
        }
    }

    pub fn hidden_width(&self, d_img: usize) -> usize {
        if self.mlp.hidden == 0 {
            d_img
        } else {
            self.mlp.hidden
        }
    }
}
