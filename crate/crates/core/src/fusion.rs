//! Image-feature gathering and gated 2D/3D fusion.
//!
//! `F_fuse = fuse_mlp([F_2d, F_voxel])`,
//! `F_2d3d = F_2d + sigmoid(gate_mlp(F_fuse)) ∘ F_fuse`.
//!
//! The MLPs are plain dense stacks with a hand-written reverse pass.
//! Batched passes split rows into fixed-size blocks so parameter-gradient
//! sums do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureRows;
use crate::voxgrid::{project_to_image, CameraModel, SparseVoxelGrid};

/// Rows per block in batched backward passes.
const BLOCK_ROWS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::None => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::None => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dense layer, `w` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn out_dim(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct MlpParams {
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    layers: Vec<Layer>,
}

impl TryFrom<MlpFile> for MlpParams {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        MlpParams::new(f.layers)
    }
}

impl From<MlpParams> for MlpFile {
    fn from(p: MlpParams) -> Self {
        MlpFile { layers: p.layers }
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("an MLP needs at least one layer".into()));
        }
        for (li, l) in layers.iter().enumerate() {
            if l.w.len() != l.b.len() {
                return Err(Error::DimensionMismatch {
                    context: "layer weight rows vs bias",
                    expected: l.b.len(),
                    actual: l.w.len(),
                });
            }
            let fan_in = l.in_dim();
            if fan_in == 0 || l.w.iter().any(|r| r.len() != fan_in) {
                return Err(Error::InvalidParameter(format!(
                    "layer {li} has ragged or empty weight rows"
                )));
            }
            if li > 0 && layers[li - 1].out_dim() != fan_in {
                return Err(Error::DimensionMismatch {
                    context: "layer chaining",
                    expected: layers[li - 1].out_dim(),
                    actual: fan_in,
                });
            }
            if l.w.iter().flatten().chain(&l.b).any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("layer {li} parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation for
    /// weights and biases. `acts[i]` is applied after layer `i`.
    pub fn init<R: Rng>(sizes: &[usize], acts: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || acts.len() != sizes.len() - 1 {
            return Err(Error::InvalidParameter(
                "need n+1 sizes and n activations for n layers".into(),
            ));
        }
        let layers = sizes
            .windows(2)
            .zip(acts)
            .map(|(io, &act)| {
                let bound = 1.0 / (io[0] as f64).sqrt();
                let w = (0..io[1])
                    .map(|_| (0..io[0]).map(|_| rng.gen_range(-bound..=bound)).collect())
                    .collect();
                let b = (0..io[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
                Layer { w, b, act }
            })
            .collect();
        Self::new(layers)
    }

    /// affine → relu → affine → `head`.
    pub fn two_layer<R: Rng>(
        input: usize,
        hidden: usize,
        output: usize,
        head: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init(&[input, hidden, output], &[Activation::Relu, head], rng)
    }

    /// All-zero single linear layer.
    pub fn zero_linear(input: usize, output: usize) -> Self {
        Self {
            layers: vec![Layer {
                w: vec![vec![0.0; input]; output],
                b: vec![0.0; output],
                act: Activation::None,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.b.len() * (l.in_dim() + 1)).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: vec![vec![0.0; l.in_dim()]; l.out_dim()],
                    b: vec![0.0; l.out_dim()],
                    act: l.act,
                })
                .collect(),
        }
    }

    /// Weights row-major then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for r in &l.w {
                out.extend_from_slice(r);
            }
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat MLP parameters",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for r in &mut l.w {
                for v in r.iter_mut() {
                    *v = it.next().unwrap();
                }
            }
            for v in &mut l.b {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// `self += alpha * other` (shapes must agree).
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            for (r, ro) in l.w.iter_mut().zip(&o.w) {
                for (v, vo) in r.iter_mut().zip(ro) {
                    *v += alpha * vo;
                }
            }
            for (v, vo) in l.b.iter_mut().zip(&o.b) {
                *v += alpha * vo;
            }
        }
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = l
                .w
                .iter()
                .zip(&l.b)
                .map(|(r, b)| l.act.apply(r.iter().zip(&cur).map(|(w, v)| w * v).sum::<f64>() + b))
                .collect();
        }
        cur
    }

    /// Batched forward pass keeping every layer's output for the reverse pass.
    pub fn forward(&self, x: &FeatureRows) -> Result<MlpTrace> {
        if !x.is_empty() && x.dim() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "MLP input",
                expected: self.in_dim(),
                actual: x.dim(),
            });
        }
        let n = x.len();
        let mut outputs: Vec<FeatureRows> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let cur = outputs.last().unwrap_or(x);
            let out_dim = l.out_dim();
            let mut data = vec![0.0; n * out_dim];
            data.par_chunks_mut(out_dim.max(1))
                .with_min_len(256)
                .enumerate()
                .for_each(|(i, o)| {
                    let r = cur.row(i);
                    for ((ov, w), b) in o.iter_mut().zip(&l.w).zip(&l.b) {
                        *ov = l.act.apply(w.iter().zip(r).map(|(a, c)| a * c).sum::<f64>() + b);
                    }
                });
            outputs.push(FeatureRows::from_flat(out_dim, data)?);
        }
        let mut input = x.clone();
        if input.is_empty() {
            input = FeatureRows::new(self.in_dim());
        }
        Ok(MlpTrace { input, outputs })
    }

    /// Reverse pass. Returns the input gradient and the parameter gradient.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &FeatureRows) -> Result<(FeatureRows, MlpParams)> {
        let n = trace.input.len();
        if grad_out.len() != n || (n > 0 && grad_out.dim() != self.out_dim()) {
            return Err(Error::DimensionMismatch {
                context: "MLP output gradient",
                expected: n,
                actual: grad_out.len(),
            });
        }
        let blocks: Vec<(Vec<Vec<f64>>, MlpParams)> = (0..n.div_ceil(BLOCK_ROWS))
            .into_par_iter()
            .map(|b| {
                let mut pg = self.zeros_like();
                let mut gin = Vec::new();
                for i in b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(n) {
                    let mut g = grad_out.row(i).to_vec();
                    for li in (0..self.layers.len()).rev() {
                        let l = &self.layers[li];
                        let out = trace.outputs[li].row(i);
                        let inp = if li == 0 {
                            trace.input.row(i)
                        } else {
                            trace.outputs[li - 1].row(i)
                        };
                        for (gv, y) in g.iter_mut().zip(out) {
                            *gv *= l.act.grad_from_output(*y);
                        }
                        let pl = &mut pg.layers[li];
                        for (o, gv) in g.iter().enumerate() {
                            pl.b[o] += gv;
                            for (wv, xv) in pl.w[o].iter_mut().zip(inp) {
                                *wv += gv * xv;
                            }
                        }
                        let mut next = vec![0.0; l.in_dim()];
                        for (o, gv) in g.iter().enumerate() {
                            for (nv, wv) in next.iter_mut().zip(&l.w[o]) {
                                *nv += gv * wv;
                            }
                        }
                        g = next;
                    }
                    gin.push(g);
                }
                (gin, pg)
            })
            .collect();
        let mut grad_in = FeatureRows::new(self.in_dim());
        let mut grad_params = self.zeros_like();
        for (gin, pg) in blocks {
            for r in gin {
                grad_in.push(&r)?;
            }
            grad_params.axpy(1.0, &pg);
        }
        Ok((grad_in, grad_params))
    }
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: FeatureRows,
    /// Post-activation output of every layer.
    pub outputs: Vec<FeatureRows>,
}

impl MlpTrace {
    pub fn output(&self) -> &FeatureRows {
        self.outputs.last().expect("at least one layer")
    }
}

/// Dense `height × width × dim` image feature raster.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D {
    width: u32,
    height: u32,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap2D {
    pub fn new(width: u32, height: u32, dim: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || dim == 0 {
            return Err(Error::InvalidParameter("feature map dimensions must be positive".into()));
        }
        let expected = width as usize * height as usize * dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "feature map data",
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("feature map"));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn constant(width: u32, height: u32, value: &[f64]) -> Result<Self> {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * value.len())
            .collect();
        Self::new(width, height, value.len(), data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature cell at column `x`, row `y`.
    pub fn cell(&self, x: u32, y: u32) -> &[f64] {
        let o = (y as usize * self.width as usize + x as usize) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Bilinear sample at continuous raster position `(px, py)`. Cell
    /// `(i, j)` is centred at `(i + 0.5, j + 0.5)`; borders are clamped.
    pub fn sample(&self, px: f64, py: f64) -> Vec<f64> {
        let x = px - 0.5;
        let y = py - 0.5;
        let x0f = x.floor();
        let y0f = y.floor();
        let wx = x - x0f;
        let wy = y - y0f;
        let clamp = |v: f64, hi: u32| v.max(0.0).min((hi - 1) as f64) as u32;
        let (x0, x1) = (clamp(x0f, self.width), clamp(x0f + 1.0, self.width));
        let (y0, y1) = (clamp(y0f, self.height), clamp(y0f + 1.0, self.height));
        let (a, b, c, d) = (
            self.cell(x0, y0),
            self.cell(x1, y0),
            self.cell(x0, y1),
            self.cell(x1, y1),
        );
        (0..self.dim)
            .map(|k| {
                (1.0 - wx) * (1.0 - wy) * a[k]
                    + wx * (1.0 - wy) * b[k]
                    + (1.0 - wx) * wy * c[k]
                    + wx * wy * d[k]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GatheredFeatures {
    pub features: FeatureRows,
    pub valid: Vec<bool>,
}

/// Bilinearly samples the image feature map at every voxel's projection.
/// The feature map may be a downscaled raster of the camera image.
pub fn gather_image_features(
    grid: &SparseVoxelGrid,
    fmap: &FeatureMap2D,
    cam: &CameraModel,
) -> GatheredFeatures {
    let sx = fmap.width() as f64 / cam.width as f64;
    let sy = fmap.height() as f64 / cam.height as f64;
    let proj = project_to_image(grid, cam);
    let rows: Vec<Option<Vec<f64>>> = proj
        .par_iter()
        .map(|p| p.valid.then(|| fmap.sample(p.u * sx, p.v * sy)))
        .collect();
    let mut features = FeatureRows::new(fmap.dim());
    let mut valid = Vec::with_capacity(rows.len());
    let zero = vec![0.0; fmap.dim()];
    for r in rows {
        valid.push(r.is_some());
        features
            .push(r.as_deref().unwrap_or(&zero))
            .expect("uniform map dim");
    }
    GatheredFeatures { features, valid }
}

#[derive(Debug, Clone)]
pub struct FuseForward {
    pub image: FeatureRows,
    pub voxel: FeatureRows,
    pub fuse_trace: MlpTrace,
    pub gate_trace: MlpTrace,
    /// `sigmoid(gate_mlp(F_fuse))`.
    pub gate: FeatureRows,
    /// `F_2d3d`.
    pub output: FeatureRows,
}

impl FuseForward {
    pub fn fused(&self) -> &FeatureRows {
        self.fuse_trace.output()
    }
}

#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub image: FeatureRows,
    pub voxel: FeatureRows,
    pub fuse_mlp: MlpParams,
    pub gate_mlp: MlpParams,
}

fn concat_rows(a: &FeatureRows, b: &FeatureRows) -> Result<FeatureRows> {
    let mut out = FeatureRows::new(a.dim() + b.dim());
    let mut row = Vec::with_capacity(a.dim() + b.dim());
    for (ra, rb) in a.iter().zip(b.iter()) {
        row.clear();
        row.extend_from_slice(ra);
        row.extend_from_slice(rb);
        out.push(&row)?;
    }
    Ok(out)
}

/// Gated fusion forward pass.
pub fn fuse(
    image: &FeatureRows,
    voxel: &FeatureRows,
    fuse_mlp: &MlpParams,
    gate_mlp: &MlpParams,
) -> Result<FuseForward> {
    if image.len() != voxel.len() {
        return Err(Error::DimensionMismatch {
            context: "fusion row count",
            expected: image.len(),
            actual: voxel.len(),
        });
    }
    let d_img = image.dim();
    if fuse_mlp.in_dim() != d_img + voxel.dim() {
        return Err(Error::DimensionMismatch {
            context: "fuse MLP input (D_img + D_vox)",
            expected: d_img + voxel.dim(),
            actual: fuse_mlp.in_dim(),
        });
    }
    if fuse_mlp.out_dim() != d_img {
        return Err(Error::DimensionMismatch {
            context: "fuse MLP output (D_img)",
            expected: d_img,
            actual: fuse_mlp.out_dim(),
        });
    }
    if gate_mlp.in_dim() != d_img || gate_mlp.out_dim() != d_img {
        return Err(Error::DimensionMismatch {
            context: "gate MLP (D_img -> D_img)",
            expected: d_img,
            actual: gate_mlp.out_dim(),
        });
    }
    let fuse_trace = fuse_mlp.forward(&concat_rows(image, voxel)?)?;
    let gate_trace = gate_mlp.forward(fuse_trace.output())?;
    let mut gate = FeatureRows::new(d_img);
    let mut output = FeatureRows::new(d_img);
    let mut g = vec![0.0; d_img];
    let mut o = vec![0.0; d_img];
    for i in 0..image.len() {
        let f = fuse_trace.output().row(i);
        for k in 0..d_img {
            g[k] = sigmoid(gate_trace.output().row(i)[k]);
            o[k] = image.row(i)[k] + g[k] * f[k];
        }
        gate.push(&g)?;
        output.push(&o)?;
    }
    Ok(FuseForward {
        image: image.clone(),
        voxel: voxel.clone(),
        fuse_trace,
        gate_trace,
        gate,
        output,
    })
}

/// Reverse pass of [`fuse`] given `∂L/∂F_2d3d`.
pub fn fuse_backward(
    fwd: &FuseForward,
    fuse_mlp: &MlpParams,
    gate_mlp: &MlpParams,
    grad_output: &FeatureRows,
) -> Result<FuseGrads> {
    let n = fwd.output.len();
    let d = fwd.output.dim();
    if grad_output.len() != n || (n > 0 && grad_output.dim() != d) {
        return Err(Error::DimensionMismatch {
            context: "fusion output gradient",
            expected: n,
            actual: grad_output.len(),
        });
    }
    // through the gate branch
    let mut d_fused = FeatureRows::new(d);
    let mut d_gate_pre = FeatureRows::new(d);
    let mut df = vec![0.0; d];
    let mut da = vec![0.0; d];
    for i in 0..n {
        let go = grad_output.row(i);
        let g = fwd.gate.row(i);
        let f = fwd.fused().row(i);
        for k in 0..d {
            df[k] = go[k] * g[k];
            da[k] = go[k] * f[k] * g[k] * (1.0 - g[k]);
        }
        d_fused.push(&df)?;
        d_gate_pre.push(&da)?;
    }
    let (d_fused_from_gate, gate_grads) = gate_mlp.backward(&fwd.gate_trace, &d_gate_pre)?;
    for (a, b) in d_fused
        .as_mut_slice()
        .iter_mut()
        .zip(d_fused_from_gate.as_slice())
    {
        *a += b;
    }
    let (d_concat, fuse_grads) = fuse_mlp.backward(&fwd.fuse_trace, &d_fused)?;
    let d_vox = fwd.voxel.dim();
    let mut d_image = FeatureRows::new(d);
    let mut d_voxel = FeatureRows::new(d_vox);
    for i in 0..n {
        let r = d_concat.row(i);
        let img: Vec<f64> = r[..d].iter().zip(grad_output.row(i)).map(|(a, b)| a + b).collect();
        d_image.push(&img)?;
        d_voxel.push(&r[d..])?;
    }
    Ok(FuseGrads {
        image: d_image,
        voxel: d_voxel,
        fuse_mlp: fuse_grads,
        gate_mlp: gate_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const I3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn mlp_json_format() {
        let json = r#"{"layers":[{"w":[[1.0,2.0]],"b":[0.5],"act":"relu"},{"w":[[3.0]],"b":[0.0],"act":"none"}]}"#;
        let m: MlpParams = serde_json::from_str(json).unwrap();
        assert_eq!(m.forward_row(&[1.0, -1.0]), vec![0.0]);
        assert_eq!(m.forward_row(&[1.0, 1.0]), vec![10.5]);
        let back = serde_json::to_string(&m).unwrap();
        assert_eq!(back, json);
        let bad = r#"{"layers":[{"w":[[1.0,2.0]],"b":[0.5],"act":"relu"},{"w":[[3.0, 1.0]],"b":[0.0],"act":"none"}]}"#;
        assert!(serde_json::from_str::<MlpParams>(bad).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpParams::two_layer(16, 8, 4, Activation::None, &mut rng).unwrap();
        assert_eq!(m.num_params(), 16 * 8 + 8 + 8 * 4 + 4);
        let l0 = &m.layers()[0];
        assert!(l0.w.iter().flatten().all(|v| v.abs() <= 0.25));
        let l1 = &m.layers()[1];
        assert!(l1.w.iter().flatten().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = MlpParams::two_layer(3, 5, 2, Activation::Sigmoid, &mut rng).unwrap();
        let mut z = m.zeros_like();
        z.set_flat(&m.to_flat()).unwrap();
        assert_eq!(z, m);
        assert!(z.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn constant_map_gathers_constant() {
        let cam = CameraModel::new(50.0, 50.0, 32.0, 24.0, I3, [0.0, 0.0, 5.0], 64, 48).unwrap();
        let fmap = FeatureMap2D::constant(16, 12, &[0.25, -3.0]).unwrap();
        let coords = vec![[0, 0, 0], [3, -2, 1], [-4, 4, 0], [0, 0, -20]];
        let g = SparseVoxelGrid::new(1, 0.5, [0.0; 3], coords, FeatureRows::zeros(4, 1)).unwrap();
        let out = gather_image_features(&g, &fmap, &cam);
        assert_eq!(out.valid, vec![true, true, true, false]);
        for i in 0..3 {
            assert!((out.features.row(i)[0] - 0.25).abs() < 1e-12);
            assert!((out.features.row(i)[1] + 3.0).abs() < 1e-12);
        }
        assert_eq!(out.features.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn sample_at_cell_center_is_exact() {
        let data: Vec<f64> = (0..4 * 3 * 2).map(|v| v as f64 * 0.7 - 3.0).collect();
        let fmap = FeatureMap2D::new(4, 3, 2, data).unwrap();
        for j in 0..3u32 {
            for i in 0..4u32 {
                assert_eq!(fmap.sample(i as f64 + 0.5, j as f64 + 0.5), fmap.cell(i, j));
            }
        }
    }

    #[test]
    fn zero_fuse_mlp_passes_image_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = FeatureRows::from_rows(&[[1.0, 2.0], [-0.5, 0.25]]).unwrap();
        let vox = FeatureRows::from_rows(&[[3.0, 1.0, 0.0], [0.0, 0.0, 7.0]]).unwrap();
        let fuse_mlp = MlpParams::zero_linear(5, 2);
        let gate = MlpParams::two_layer(2, 2, 2, Activation::None, &mut rng).unwrap();
        let f = fuse(&img, &vox, &fuse_mlp, &gate).unwrap();
        assert_eq!(f.output, img);
        assert!(f.fused().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn selecting_fuse_and_zero_gate_scales_by_one_and_a_half() {
        let img = FeatureRows::from_rows(&[[1.0, -2.0], [4.0, 0.5]]).unwrap();
        let vox = FeatureRows::from_rows(&[[9.0], [-9.0]]).unwrap();
        // selects the image block of [F_2d, F_voxel]
        let fuse_mlp = MlpParams::new(vec![Layer {
            w: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            b: vec![0.0, 0.0],
            act: Activation::None,
        }])
        .unwrap();
        let gate = MlpParams::zero_linear(2, 2);
        let f = fuse(&img, &vox, &fuse_mlp, &gate).unwrap();
        for (o, i) in f.output.as_slice().iter().zip(img.as_slice()) {
            assert_eq!(*o, 1.5 * i);
        }
        assert!(f.gate.as_slice().iter().all(|g| *g == 0.5));
    }

    #[test]
    fn fuse_dimension_errors() {
        let img = FeatureRows::from_rows(&[[1.0, 2.0]]).unwrap();
        let vox = FeatureRows::from_rows(&[[3.0]]).unwrap();
        let g = MlpParams::zero_linear(2, 2);
        assert!(fuse(&img, &vox, &MlpParams::zero_linear(2, 2), &g).is_err());
        assert!(fuse(&img, &vox, &MlpParams::zero_linear(3, 3), &g).is_err());
        assert!(fuse(&img, &vox, &MlpParams::zero_linear(3, 2), &MlpParams::zero_linear(3, 2)).is_err());
        let two = FeatureRows::from_rows(&[[3.0], [1.0]]).unwrap();
        assert!(fuse(&img, &two, &MlpParams::zero_linear(3, 2), &g).is_err());
    }
}
