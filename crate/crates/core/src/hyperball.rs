//! Poincaré-ball geometry used for the cross-modal feature transfer.
//!
//! Only the pieces the distillation path needs are here: clipping a
//! Euclidean feature into the ball, Möbius addition, the logarithmic map
//! (at the origin, plus the general form built from Möbius addition) and
//! the tangent-space distillation loss with its analytic gradient.
//!
//! The ball of curvature `k < 0` is `{x : ‖x‖ < 1/sqrt(|k|)}`. Points
//! whose norm exceeds `(1 - eps)` times that radius are radially rescaled
//! onto the shrunken sphere.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{dot, norm, FeatureRows};

/// Below this norm a vector is treated as the origin (direction = 0).
pub const ZERO_NORM: f64 = 1e-15;

/// Möbius denominators smaller than this are rejected.
pub const MIN_DENOMINATOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareBall {
    k: f64,
    eps: f64,
}

impl Default for PoincareBall {
    fn default() -> Self {
        Self { k: -1.0, eps: 1e-5 }
    }
}

impl PoincareBall {
    /// `curvature` may be given with either sign; only `|k|` is used.
    pub fn new(curvature: f64, eps: f64) -> Result<Self> {
        if !curvature.is_finite() || curvature == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "curvature magnitude |k| must be finite and > 0, got {curvature}"
            )));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "clip margin eps must lie in (0, 1), got {eps}"
            )));
        }
        Ok(Self {
            k: -curvature.abs(),
            eps,
        })
    }

    /// Signed (negative) curvature.
    pub fn curvature(&self) -> f64 {
        self.k
    }

    pub fn k_abs(&self) -> f64 {
        self.k.abs()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn radius(&self) -> f64 {
        1.0 / self.k_abs().sqrt()
    }

    /// Largest norm left untouched by [`clip_to_ball`].
    pub fn clip_norm(&self) -> f64 {
        (1.0 - self.eps) * self.radius()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        norm(x) < self.radius()
    }

    /// Conformal factor `2 / (1 - |k|‖z‖²)`.
    pub fn conformal_factor(&self, z: &[f64]) -> f64 {
        2.0 / (1.0 - self.k_abs() * dot(z, z))
    }
}

/// A point strictly inside its ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    pub fn new(coords: Vec<f64>, ball: &PoincareBall) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("ball point"));
        }
        let n = norm(&coords);
        if n >= ball.radius() {
            return Err(Error::InvalidParameter(format!(
                "point norm {n} is not inside the ball of radius {}",
                ball.radius()
            )));
        }
        Ok(Self(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn neg(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(pub Vec<f64>);

impl TangentVector {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// Scale factor applied by the clip map: 1 inside, `m/‖x‖` outside,
/// lowered by whole ulps until the result's computed norm is `<= m`.
fn clip_scale(x: &[f64], max_norm: f64) -> f64 {
    let n = norm(x);
    if n <= max_norm {
        return 1.0;
    }
    let mut scale = max_norm / n;
    loop {
        let scaled: f64 = x.iter().map(|v| (v * scale) * (v * scale)).sum::<f64>().sqrt();
        if scaled <= max_norm {
            return scale;
        }
        scale = f64::from_bits(scale.to_bits() - 1);
    }
}

pub fn clip_to_ball(x: &[f64], ball: &PoincareBall) -> Result<BallPoint> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("clip_to_ball input"));
    }
    let scale = clip_scale(x, ball.clip_norm());
    if scale == 1.0 {
        return Ok(BallPoint(x.to_vec()));
    }
    Ok(BallPoint(x.iter().map(|v| v * scale).collect()))
}

/// Möbius addition `z ⊕_k x`, re-clipped into the ball.
pub fn mobius_add(z: &BallPoint, x: &BallPoint, ball: &PoincareBall) -> Result<BallPoint> {
    let (z, x) = (z.coords(), x.coords());
    if z.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "mobius_add",
            expected: z.len(),
            actual: x.len(),
        });
    }
    let c = ball.k_abs();
    let zx = dot(z, x);
    let zz = dot(z, z);
    let xx = dot(x, x);
    let denom = 1.0 + 2.0 * c * zx + c * c * zz * xx;
    if denom.abs() < MIN_DENOMINATOR {
        return Err(Error::Degenerate(format!(
            "Möbius denominator {denom:e} below {MIN_DENOMINATOR:e}"
        )));
    }
    let a = 1.0 + 2.0 * c * zx + c * xx;
    let b = 1.0 - c * zz;
    let out: Vec<f64> = z
        .iter()
        .zip(x)
        .map(|(zi, xi)| (a * zi + b * xi) / denom)
        .collect();
    clip_to_ball(&out, ball)
}

/// `atanh(sqrt|k|·n) / (sqrt|k|·n)`, the radial gain of the origin log map.
fn log_gain(n: f64, sqrt_k: f64) -> f64 {
    let u = sqrt_k * n;
    if u < 1e-8 {
        1.0 + u * u / 3.0
    } else {
        u.atanh() / u
    }
}

pub fn log_map_zero(x: &BallPoint, ball: &PoincareBall) -> TangentVector {
    let x = x.coords();
    let n = norm(x);
    if n < ZERO_NORM {
        return TangentVector(vec![0.0; x.len()]);
    }
    let s = ball.k_abs().sqrt();
    let gain = (s * n).atanh() / (s * n);
    TangentVector(x.iter().map(|v| v * gain).collect())
}

/// Log map at an arbitrary base point `z`:
/// `2/(sqrt|k|·λ(z)) · atanh(sqrt|k|·‖w‖) · w/‖w‖` with `w = (-z) ⊕ x`.
pub fn log_map(z: &BallPoint, x: &BallPoint, ball: &PoincareBall) -> Result<TangentVector> {
    let w = mobius_add(&z.neg(), x, ball)?;
    let wn = norm(w.coords());
    if wn < ZERO_NORM {
        return Ok(TangentVector(vec![0.0; w.0.len()]));
    }
    let s = ball.k_abs().sqrt();
    let coef = 2.0 / (s * ball.conformal_factor(z.coords())) * (s * wn).atanh() / wn;
    Ok(TangentVector(w.0.iter().map(|v| v * coef).collect()))
}

/// Clip then log-map a raw Euclidean vector.
///
/// A clipped point has norm `clip_norm` by construction, so its radial
/// gain is taken at that norm rather than re-measured: near the boundary
/// `atanh` would amplify the last-ulp error of the recomputed norm.
pub fn to_tangent(x: &[f64], ball: &PoincareBall) -> Result<TangentVector> {
    let y = clip_to_ball(x, ball)?;
    if norm(x) <= ball.clip_norm() {
        return Ok(log_map_zero(&y, ball));
    }
    let gain = log_gain(ball.clip_norm(), ball.k_abs().sqrt());
    Ok(TangentVector(y.0.iter().map(|v| v * gain).collect()))
}

/// Vector-Jacobian product of `x -> log_map_zero(clip_to_ball(x))`.
///
/// The clip is differentiated piecewise; at the origin the log map has
/// identity Jacobian.
pub fn to_tangent_vjp(x: &[f64], upstream: &[f64], ball: &PoincareBall) -> Vec<f64> {
    let m = ball.clip_norm();
    let nx = norm(x);
    let clipped = nx > m;
    let y: Vec<f64> = if clipped {
        let scale = clip_scale(x, m);
        x.iter().map(|v| v * scale).collect()
    } else {
        x.to_vec()
    };

    // log map: v = g(n) y, dv/dy = g I + (g'(n)/n) y yᵀ; the radial
    // term is annihilated by the clip Jacobian, so skip it when clipped
    let s = ball.k_abs().sqrt();
    let n = norm(&y);
    let y_bar: Vec<f64> = if clipped {
        let g = log_gain(m, s);
        upstream.iter().map(|ub| g * ub).collect()
    } else if n < ZERO_NORM {
        upstream.to_vec()
    } else {
        let g = log_gain(n, s);
        let u = s * n;
        // (1/(1-u²) - g) / n²
        let radial = if u < 1e-3 {
            let u2 = u * u;
            s * s * (2.0 / 3.0 + u2 * (4.0 / 5.0 + u2 * 6.0 / 7.0))
        } else {
            (1.0 / (1.0 - u * u) - g) / (n * n)
        };
        let proj = dot(&y, upstream) * radial;
        upstream
            .iter()
            .zip(&y)
            .map(|(ub, yi)| g * ub + proj * yi)
            .collect()
    };

    if !clipped {
        return y_bar;
    }
    // y = m x / ‖x‖ : dy/dx = (m/‖x‖)(I - x xᵀ/‖x‖²)
    let coef = m / nx;
    let proj = dot(x, &y_bar) / (nx * nx);
    y_bar
        .iter()
        .zip(x)
        .map(|(yb, xi)| coef * (yb - proj * xi))
        .collect()
}

#[derive(Debug, Clone)]
pub struct DistillLoss {
    /// `Σ_t loss_t`.
    pub loss: f64,
    pub per_stride: Vec<f64>,
    pub grad_teacher: Vec<FeatureRows>,
    pub grad_student: Vec<FeatureRows>,
}

/// Tangent-space distillation loss: per stride, the Frobenius norm of the
/// difference between the clipped+log-mapped teacher and student rows,
/// summed over strides.
pub fn hyperbolic_distill_loss(
    teacher: &[FeatureRows],
    student: &[FeatureRows],
    ball: &PoincareBall,
) -> Result<DistillLoss> {
    if teacher.len() != student.len() {
        return Err(Error::DimensionMismatch {
            context: "distill stride count",
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    let mut out = DistillLoss {
        loss: 0.0,
        per_stride: Vec::with_capacity(teacher.len()),
        grad_teacher: Vec::with_capacity(teacher.len()),
        grad_student: Vec::with_capacity(teacher.len()),
    };
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != s.len() {
            return Err(Error::DimensionMismatch {
                context: "distill row count",
                expected: t.len(),
                actual: s.len(),
            });
        }
        if !t.is_empty() && t.dim() != s.dim() {
            return Err(Error::DimensionMismatch {
                context: "distill feature dimension",
                expected: t.dim(),
                actual: s.dim(),
            });
        }
        if !t.all_finite() || !s.all_finite() {
            return Err(Error::non_finite("distillation features"));
        }
        let dim = t.dim();
        let diffs: Vec<Vec<f64>> = (0..t.len())
            .into_par_iter()
            .map(|i| {
                let vt = to_tangent(t.row(i), ball).expect("finite rows");
                let vs = to_tangent(s.row(i), ball).expect("finite rows");
                vt.0.iter().zip(&vs.0).map(|(a, b)| a - b).collect()
            })
            .collect();
        let mut sq = 0.0;
        for d in &diffs {
            sq += dot(d, d);
        }
        let loss_t = sq.sqrt();

        let (gt, gs) = if loss_t == 0.0 {
            (FeatureRows::zeros(t.len(), dim), FeatureRows::zeros(s.len(), dim))
        } else {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = diffs
                .par_iter()
                .enumerate()
                .map(|(i, d)| {
                    let up: Vec<f64> = d.iter().map(|v| v / loss_t).collect();
                    let neg: Vec<f64> = up.iter().map(|v| -v).collect();
                    (
                        to_tangent_vjp(t.row(i), &up, ball),
                        to_tangent_vjp(s.row(i), &neg, ball),
                    )
                })
                .collect();
            let mut gt = FeatureRows::zeros(t.len(), dim);
            let mut gs = FeatureRows::zeros(s.len(), dim);
            for (i, (a, b)) in rows.into_iter().enumerate() {
                gt.row_mut(i).copy_from_slice(&a);
                gs.row_mut(i).copy_from_slice(&b);
            }
            (gt, gs)
        };
        out.loss += loss_t;
        out.per_stride.push(loss_t);
        out.grad_teacher.push(gt);
        out.grad_student.push(gs);
    }
    Ok(out)
}
