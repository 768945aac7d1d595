//! Differentiable toy face generator.
//!
//! `z -> w` is a fixed two-layer map; `w` is broadcast into an 8-layer code
//! `w+`. The semantic parameters are exactly affine in the layered code,
//! `q = B vec(w+) + c`, with `B` having orthonormal rows. `q` is laid out as
//! `[yaw, pitch, roll | 12 expression | 10 identity | 8 nuisance]` and
//! decoded into render parameters:
//!
//! * angles: `theta = 40 deg * q`
//! * expression / identity: `scale * tanh(q)`
//! * nuisance: background offsets and gradients, `0.3 * tanh(q)` in logit units
//!
//! The renderer projects the posed landmark shape and draws one isotropic
//! Gaussian per landmark over a sigmoid face oval whose tint is affine in the
//! identity coefficients. Everything is composed in logit space and squashed
//! once by a logistic, so the image is smooth in `w+`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image::{FaceImage, PIXELS, PLANE};
use crate::linalg::orthonormalize_columns;
use crate::rng;
use crate::shape3d::{apply_pose, apply_pose_vjp, project_landmarks, PoseParams, Shape3D, ShapeModel, PROJECTION_SCALE};
use crate::{EXP_DIM, ID_DIM, IMAGE_SIZE, LATENT_DIM, NUISANCE_DIM, NUM_LANDMARKS, NUM_LAYERS, Q_DIM, WPLUS_DIM};

/// Offsets of each block inside `q`.
pub const Q_THETA: usize = 0;
pub const Q_EXP: usize = 3;
pub const Q_ID: usize = 3 + EXP_DIM;
pub const Q_NUISANCE: usize = 3 + EXP_DIM + ID_DIM;

/// Target standard deviation of the pose rows of `q` under the sampling prior.
const TARGET_Q_STD: f64 = 0.45;
/// Weight of the layer-broadcast component of each semantic row.
const BROADCAST_WEIGHT: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentKind {
    Z,
    W,
    WPlus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub kind: LatentKind,
    /// `LATENT_DIM` values for Z/W, layer-major `NUM_LAYERS * LATENT_DIM` for W+.
    pub data: Vec<f64>,
}

impl LatentCode {
    pub fn new(kind: LatentKind, data: Vec<f64>) -> Result<Self> {
        let want = match kind {
            LatentKind::Z | LatentKind::W => LATENT_DIM,
            LatentKind::WPlus => WPLUS_DIM,
        };
        if data.len() != want {
            return Err(contract(format!("{kind:?} code needs {want} values, got {}", data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(contract("latent code has non-finite entries"));
        }
        Ok(Self { kind, data })
    }

    pub fn wplus(data: Vec<f64>) -> Result<Self> {
        Self::new(LatentKind::WPlus, data)
    }

    pub fn zeros_wplus() -> Self {
        Self { kind: LatentKind::WPlus, data: vec![0.0; WPLUS_DIM] }
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.data[l * LATENT_DIM..(l + 1) * LATENT_DIM]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.data[l * LATENT_DIM..(l + 1) * LATENT_DIM]
    }

    pub fn expect_kind(&self, kind: LatentKind) -> Result<()> {
        if self.kind != kind {
            return Err(contract(format!("expected a {kind:?} code, got {:?}", self.kind)));
        }
        Ok(())
    }

    /// `self + delta` for a layered code and a flat `WPLUS_DIM` shift.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        self.expect_kind(LatentKind::WPlus)?;
        if delta.len() != WPLUS_DIM {
            return Err(contract(format!("shift needs {WPLUS_DIM} values, got {}", delta.len())));
        }
        Ok(Self { kind: LatentKind::WPlus, data: self.data.iter().zip(delta).map(|(a, b)| a + b).collect() })
    }
}

/// i.i.d. standard-normal Z codes.
pub fn sample_z(count: usize, seed: u64) -> Vec<LatentCode> {
    let mut r = rng::derive(seed, 0x5a);
    (0..count)
        .map(|_| LatentCode { kind: LatentKind::Z, data: rng::normal_vec(&mut r, LATENT_DIM, 1.0) })
        .collect()
}

/// Copies a W code into every layer.
pub fn broadcast_wplus(w: &LatentCode) -> Result<LatentCode> {
    w.expect_kind(LatentKind::W)?;
    let mut data = Vec::with_capacity(WPLUS_DIM);
    for _ in 0..NUM_LAYERS {
        data.extend_from_slice(&w.data);
    }
    Ok(LatentCode { kind: LatentKind::WPlus, data })
}

/// Scales that turn semantic coordinates into render parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub theta_scale_deg: f64,
    pub expression_scale: f64,
    pub identity_scale: f64,
    /// Logit amplitude of each nuisance background term.
    pub nuisance_scale: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { theta_scale_deg: 40.0, expression_scale: 1.0, identity_scale: 1.0, nuisance_scale: 0.3 }
    }
}

/// Renderer weights that inference-time tuning may adjust.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub tint_base: [f64; 3],
    /// `[plane][channel][identity]`, planes = constant, x-gradient, y-gradient.
    pub tint_identity: Vec<f64>,
    pub background_base: [f64; 3],
}

impl SynthesisParams {
    pub const LEN: usize = 3 + 3 * 3 * ID_DIM + 3;

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.tint_base);
        v.extend_from_slice(&self.tint_identity);
        v.extend_from_slice(&self.background_base);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(contract(format!("synthesis params need {} values, got {}", Self::LEN, v.len())));
        }
        let n = 3 * 3 * ID_DIM;
        Ok(Self {
            tint_base: [v[0], v[1], v[2]],
            tint_identity: v[3..3 + n].to_vec(),
            background_base: [v[3 + n], v[4 + n], v[5 + n]],
        })
    }

    #[inline]
    fn tint(&self, plane: usize, c: usize, j: usize) -> f64 {
        self.tint_identity[(plane * 3 + c) * ID_DIM + j]
    }
}

/// Everything the renderer consumes: face parameters plus background nuisance.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderParams {
    pub pose: PoseParams,
    pub nuisance: [f64; NUISANCE_DIM],
}

impl RenderParams {
    /// Same layout as `q`: theta, expression, identity, nuisance.
    pub const LEN: usize = Q_DIM;

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.pose.to_vec();
        v.extend_from_slice(&self.nuisance);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(contract(format!("render params need {} values, got {}", Self::LEN, v.len())));
        }
        let pose = PoseParams::from_slice(&v[..Q_NUISANCE])?;
        let mut nuisance = [0.0; NUISANCE_DIM];
        nuisance.copy_from_slice(&v[Q_NUISANCE..]);
        Ok(Self { pose, nuisance })
    }
}

/// Landmark-blob renderer over a tinted face oval and a nuisance background.
#[derive(Clone, Debug, PartialEq)]
pub struct Renderer {
    pub shape_model: ShapeModel,
    pub blob_sigma_px: f64,
    pub blob_amplitude: f64,
    /// Face oval center x, center y, radius x, radius y (pixels) and edge sharpness.
    pub oval: [f64; 5],
    pub synthesis: SynthesisParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    pub seed: u64,
    /// Row-major `64 x 64`.
    pub mapping_hidden: Vec<f64>,
    /// Row-major `64 x 64`.
    pub mapping_out: Vec<f64>,
    /// `B`, row-major `Q_DIM x WPLUS_DIM`, orthonormal rows.
    pub semantic_basis: Vec<f64>,
    /// `c`, length `Q_DIM`.
    pub semantic_offset: Vec<f64>,
    pub calibration: Calibration,
    pub renderer: Renderer,
}

/// Intermediate values of one render, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderTape {
    pub params: RenderParams,
    pub unposed: Shape3D,
    pub landmarks: Vec<[f64; 2]>,
    pub image: FaceImage,
    mask: Vec<f64>,
}

impl RenderTape {
    /// Face-oval coverage per pixel, 1 inside the face.
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }
}

/// Gradient of a scalar with respect to the render inputs.
#[derive(Clone, Debug)]
pub struct RenderGrad {
    /// d/d render params, ordered as [`RenderParams::to_vec`].
    pub params: Vec<f64>,
    /// d/d synthesis params, ordered as [`SynthesisParams::to_vec`].
    pub synthesis: Vec<f64>,
}

const GROUP_COLORS: [[f64; 3]; 6] = [
    [1.0, -0.3, -0.3],
    [-0.3, 1.0, -0.3],
    [-0.3, -0.3, 1.0],
    [0.8, 0.8, -0.6],
    [0.9, -0.5, 0.7],
    [-0.7, 0.6, 0.9],
];

fn landmark_color(k: usize) -> [f64; 3] {
    // k is 0-indexed
    let g = match k + 1 {
        1..=17 => 0,
        18..=27 => 1,
        28..=36 => 2,
        37..=48 => 3,
        49..=60 => 4,
        _ => 5,
    };
    GROUP_COLORS[g]
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn pixel_coords(x: usize, y: usize) -> (f64, f64, f64, f64) {
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;
    (px, py, (px - 32.0) / 32.0, (py - 32.0) / 32.0)
}

impl Renderer {
    pub fn new(shape_model: ShapeModel, r: &mut rng::Rng) -> Self {
        let mut tint_identity = rng::normal_vec(r, ID_DIM * 3, 0.35);
        tint_identity.extend(rng::normal_vec(r, 2 * ID_DIM * 3, 0.25));
        Self {
            shape_model,
            blob_sigma_px: 1.5,
            blob_amplitude: 2.0,
            oval: [32.0, 32.5, 21.0, 24.0, 6.0],
            synthesis: SynthesisParams { tint_base: [0.6, 0.1, -0.3], tint_identity, background_base: [-1.0, -0.6, -0.2] },
        }
    }

    pub fn landmarks(&self, params: &RenderParams) -> Vec<[f64; 2]> {
        project_landmarks(&self.shape_model.posed_shape(&params.pose))
    }

    pub fn render(&self, params: &RenderParams) -> FaceImage {
        self.render_with_tape(params).image
    }

    fn mask_at(&self, px: f64, py: f64) -> f64 {
        let [ocx, ocy, rx, ry, sharp] = self.oval;
        let e = 1.0 - ((px - ocx) / rx).powi(2) - ((py - ocy) / ry).powi(2);
        sigmoid(sharp * e)
    }

    /// Per-channel tint coefficients `(constant, x-gradient, y-gradient)` from identity.
    fn tint_planes(&self, identity: &[f64]) -> [[f64; 3]; 3] {
        let syn = &self.synthesis;
        let mut t = [[0.0; 3]; 3];
        for (plane, tp) in t.iter_mut().enumerate() {
            for (c, v) in tp.iter_mut().enumerate() {
                for (j, p) in identity.iter().enumerate() {
                    *v += syn.tint(plane, c, j) * p;
                }
            }
        }
        for c in 0..3 {
            t[0][c] += syn.tint_base[c];
        }
        t
    }

    pub fn render_with_tape(&self, params: &RenderParams) -> RenderTape {
        let p = &params.pose;
        let n = &params.nuisance;
        let syn = &self.synthesis;
        let unposed = self
            .shape_model
            .reconstruct_shape(&p.identity, &p.expression)
            .expect("fixed-size coefficients");
        let posed = apply_pose(&unposed, p.theta);
        let landmarks = project_landmarks(&posed);
        let tint = self.tint_planes(&p.identity);

        let mut logits = vec![0.0; 3 * PLANE];
        let mut mask = vec![0.0; PLANE];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (px, py, xn, yn) = pixel_coords(x, y);
                let m = self.mask_at(px, py);
                let idx = y * IMAGE_SIZE + x;
                mask[idx] = m;
                for c in 0..3 {
                    let mut bg = syn.background_base[c] + n[c] + n[3 + c] * xn;
                    if c < 2 {
                        bg += n[6 + c] * yn;
                    }
                    let t = tint[0][c] + tint[1][c] * xn + tint[2][c] * yn;
                    logits[c * PLANE + idx] = (1.0 - m) * bg + m * t;
                }
            }
        }

        let sigma = self.blob_sigma_px;
        let inv2s2 = 0.5 / (sigma * sigma);
        let radius = (6.0 * sigma).ceil() as isize;
        for (k, uv) in landmarks.iter().enumerate() {
            let col = landmark_color(k);
            let (x0, x1, y0, y1) = blob_window(uv, radius);
            for y in y0..y1 {
                let dy = y as f64 + 0.5 - uv[1];
                for x in x0..x1 {
                    let dx = x as f64 + 0.5 - uv[0];
                    let g = self.blob_amplitude * (-(dx * dx + dy * dy) * inv2s2).exp();
                    let idx = y * IMAGE_SIZE + x;
                    for c in 0..3 {
                        logits[c * PLANE + idx] += g * col[c];
                    }
                }
            }
        }

        let image = FaceImage { pixels: logits.into_iter().map(sigmoid).collect() };
        RenderTape { params: params.clone(), unposed, landmarks, image, mask }
    }

    /// Backward pass of [`Renderer::render_with_tape`].
    pub fn render_vjp(&self, tape: &RenderTape, grad_image: &[f64]) -> RenderGrad {
        let syn = &self.synthesis;
        let p = &tape.params.pose;
        let dlogit: Vec<f64> = tape.image.pixels.iter().zip(grad_image).map(|(s, g)| g * s * (1.0 - s)).collect();

        let mut g_bg = [0.0; 3];
        let mut g_nuis = [0.0; NUISANCE_DIM];
        let mut g_t = [[0.0; 3]; 3];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (_, _, xn, yn) = pixel_coords(x, y);
                let idx = y * IMAGE_SIZE + x;
                let m = tape.mask[idx];
                for c in 0..3 {
                    let d = dlogit[c * PLANE + idx];
                    let dbg = d * (1.0 - m);
                    g_bg[c] += dbg;
                    g_nuis[3 + c] += dbg * xn;
                    if c < 2 {
                        g_nuis[6 + c] += dbg * yn;
                    }
                    let dt = d * m;
                    g_t[0][c] += dt;
                    g_t[1][c] += dt * xn;
                    g_t[2][c] += dt * yn;
                }
            }
        }
        g_nuis[..3].copy_from_slice(&g_bg);

        let mut synthesis = Vec::with_capacity(SynthesisParams::LEN);
        synthesis.extend_from_slice(&g_t[0]);
        let mut g_id = [0.0; ID_DIM];
        for (plane, gp) in g_t.iter().enumerate() {
            for c in 0..3 {
                for j in 0..ID_DIM {
                    synthesis.push(gp[c] * p.identity[j]);
                    g_id[j] += gp[c] * syn.tint(plane, c, j);
                }
            }
        }
        synthesis.extend_from_slice(&g_bg);

        let sigma = self.blob_sigma_px;
        let inv2s2 = 0.5 / (sigma * sigma);
        let inv_s2 = 1.0 / (sigma * sigma);
        let radius = (6.0 * sigma).ceil() as isize;
        let mut g_posed = vec![[0.0; 3]; NUM_LANDMARKS];
        for (k, uv) in tape.landmarks.iter().enumerate() {
            let col = landmark_color(k);
            let (x0, x1, y0, y1) = blob_window(uv, radius);
            let mut gu = 0.0;
            let mut gv = 0.0;
            for y in y0..y1 {
                let dy = y as f64 + 0.5 - uv[1];
                for x in x0..x1 {
                    let dx = x as f64 + 0.5 - uv[0];
                    let idx = y * IMAGE_SIZE + x;
                    let s = dlogit[idx] * col[0] + dlogit[PLANE + idx] * col[1] + dlogit[2 * PLANE + idx] * col[2];
                    if s == 0.0 {
                        continue;
                    }
                    let g = self.blob_amplitude * (-(dx * dx + dy * dy) * inv2s2).exp() * s * inv_s2;
                    gu += g * dx;
                    gv += g * dy;
                }
            }
            g_posed[k] = [PROJECTION_SCALE * gu, -PROJECTION_SCALE * gv, 0.0];
        }
        let (g_unposed, g_theta) = apply_pose_vjp(&tape.unposed, p.theta, &g_posed);
        let (g_id_shape, g_exp) = self.shape_model.reconstruct_vjp(&g_unposed);

        let mut params = Vec::with_capacity(RenderParams::LEN);
        params.extend_from_slice(&g_theta);
        params.extend_from_slice(&g_exp);
        params.extend((0..ID_DIM).map(|j| g_id_shape[j] + g_id[j]));
        params.extend_from_slice(&g_nuis);
        RenderGrad { params, synthesis }
    }

    /// Image and its Jacobian with respect to the render parameters, as
    /// `RenderParams::LEN` rows of `PIXELS` values.
    pub fn render_jacobian(&self, params: &RenderParams) -> (FaceImage, Vec<f64>) {
        let mut jac = Vec::new();
        let image = self.render_jacobian_into(params, &mut jac);
        (image, jac)
    }

    /// [`Renderer::render_jacobian`] writing into a reusable buffer.
    pub fn render_jacobian_into(&self, params: &RenderParams, jac: &mut Vec<f64>) -> FaceImage {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required feature was detected at runtime.
            return unsafe { self.jacobian_avx2(params, jac) };
        }
        self.jacobian_impl(params, jac)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn jacobian_avx2(&self, params: &RenderParams, jac: &mut Vec<f64>) -> FaceImage {
        self.jacobian_impl(params, jac)
    }

    #[inline(always)]
    fn jacobian_impl(&self, params: &RenderParams, jac: &mut Vec<f64>) -> FaceImage {
        let tape = self.render_with_tape(params);
        let p = &params.pose;
        let syn = &self.synthesis;
        let np = RenderParams::LEN;
        jac.clear();
        jac.resize(np * PIXELS, 0.0);
        let row = |i: usize| i * PIXELS;

        let coords: Vec<(f64, f64)> =
            (0..PLANE).map(|idx| { let (_, _, xn, yn) = pixel_coords(idx % IMAGE_SIZE, idx / IMAGE_SIZE); (xn, yn) }).collect();
        for c in 0..3 {
            for idx in 0..PLANE {
                let b = 1.0 - tape.mask[idx];
                let (xn, yn) = coords[idx];
                jac[row(Q_NUISANCE + c) + c * PLANE + idx] = b;
                jac[row(Q_NUISANCE + 3 + c) + c * PLANE + idx] = b * xn;
                if c < 2 {
                    jac[row(Q_NUISANCE + 6 + c) + c * PLANE + idx] = b * yn;
                }
            }
        }
        for j in 0..ID_DIM {
            let r = &mut jac[row(Q_ID + j)..row(Q_ID + j + 1)];
            for c in 0..3 {
                let (t0, t1, t2) = (syn.tint(0, c, j), syn.tint(1, c, j), syn.tint(2, c, j));
                for idx in 0..PLANE {
                    let (xn, yn) = coords[idx];
                    r[c * PLANE + idx] = tape.mask[idx] * (t0 + t1 * xn + t2 * yn);
                }
            }
        }

        // d(u, v) / d(theta, expression, identity) per landmark.
        let r = crate::shape3d::rotation_matrix(p.theta);
        let dr = crate::shape3d::rotation_derivatives(p.theta);
        let sm = &self.shape_model;
        let nshape = Q_NUISANCE;
        let mut duv = vec![[[0.0; 2]; Q_NUISANCE]; NUM_LANDMARKS];
        for (k, v) in tape.unposed.vertices.iter().enumerate() {
            for (i, d) in dr.iter().enumerate() {
                let dv = crate::shape3d::mat_vec3(d, v);
                duv[k][Q_THETA + i] = [PROJECTION_SCALE * dv[0], -PROJECTION_SCALE * dv[1]];
            }
            for j in 0..EXP_DIM {
                let b = [0, 1, 2].map(|a| sm.expression_basis[(3 * k + a) * EXP_DIM + j]);
                let dv = crate::shape3d::mat_vec3(&r, &b);
                duv[k][Q_EXP + j] = [PROJECTION_SCALE * dv[0], -PROJECTION_SCALE * dv[1]];
            }
            for j in 0..ID_DIM {
                let b = [0, 1, 2].map(|a| sm.identity_basis[(3 * k + a) * ID_DIM + j]);
                let dv = crate::shape3d::mat_vec3(&r, &b);
                duv[k][Q_ID + j] = [PROJECTION_SCALE * dv[0], -PROJECTION_SCALE * dv[1]];
            }
        }

        // Blob sensitivities to each landmark's (u, v), then one pass per parameter row.
        let sigma = self.blob_sigma_px;
        let inv2s2 = 0.5 / (sigma * sigma);
        let inv_s2 = 1.0 / (sigma * sigma);
        let radius = (6.0 * sigma).ceil() as isize;
        let windows: Vec<Vec<(usize, f64, f64)>> = tape
            .landmarks
            .iter()
            .map(|uv| {
                let (x0, x1, y0, y1) = blob_window(uv, radius);
                let mut w = Vec::with_capacity((x1 - x0) * (y1 - y0));
                for y in y0..y1 {
                    let dy = y as f64 + 0.5 - uv[1];
                    for x in x0..x1 {
                        let dx = x as f64 + 0.5 - uv[0];
                        let g = self.blob_amplitude * (-(dx * dx + dy * dy) * inv2s2).exp() * inv_s2;
                        w.push((y * IMAGE_SIZE + x, g * dx, g * dy));
                    }
                }
                w
            })
            .collect();
        for i in 0..nshape {
            let r = &mut jac[row(i)..row(i + 1)];
            for (k, win) in windows.iter().enumerate() {
                let col = landmark_color(k);
                let [du, dv] = duv[k][i];
                for &(idx, au, av) in win {
                    let s = au * du + av * dv;
                    r[idx] += s * col[0];
                    r[PLANE + idx] += s * col[1];
                    r[2 * PLANE + idx] += s * col[2];
                }
            }
        }

        for i in 0..np {
            for (j, s) in jac[row(i)..row(i + 1)].iter_mut().zip(&tape.image.pixels) {
                *j *= s * (1.0 - s);
            }
        }
        tape.image
    }
}

impl ToyGenerator {
    pub fn new(seed: u64) -> Self {
        Self::with_shape_model(seed, ShapeModel::new(seed))
    }

    pub fn with_shape_model(seed: u64, shape_model: ShapeModel) -> Self {
        let mut r = rng::derive(seed, 2);
        let gain = 1.2 / (LATENT_DIM as f64).sqrt();
        let mapping_hidden = rng::normal_vec(&mut r, LATENT_DIM * LATENT_DIM, gain);
        let mapping_out = rng::normal_vec(&mut r, LATENT_DIM * LATENT_DIM, 1.0 / (LATENT_DIM as f64).sqrt());

        let semantic_basis = build_semantic_basis(&mut r);
        let mut semantic_offset = vec![0.0; Q_DIM];
        for v in semantic_offset[Q_ID..].iter_mut() {
            *v = 0.1 * rng::normal_vec(&mut r, 1, 1.0)[0];
        }
        let renderer = Renderer::new(shape_model, &mut r);

        let mut gen = Self {
            seed,
            mapping_hidden,
            mapping_out,
            semantic_basis,
            semantic_offset,
            calibration: Calibration::default(),
            renderer,
        };

        // Scale the output layer so pose coordinates have the target spread.
        let zs = sample_z(2000, seed ^ 0xca11);
        let mut sq = 0.0;
        let mut count = 0.0;
        for z in &zs {
            let q = gen.semantic_params(&gen.sample_wplus_from_z(z)).expect("wplus");
            for v in &q[Q_THETA..Q_THETA + 3] {
                sq += v * v;
                count += 1.0;
            }
        }
        let scale = TARGET_Q_STD / (sq / count).sqrt();
        gen.mapping_out.iter_mut().for_each(|v| *v *= scale);
        gen
    }

    /// `w = W_out tanh(W_hidden z)`; odd in `z`, so the prior over `w` is symmetric.
    pub fn map_to_w(&self, z: &LatentCode) -> Result<LatentCode> {
        z.expect_kind(LatentKind::Z)?;
        let h: Vec<f64> = (0..LATENT_DIM)
            .map(|i| {
                let row = &self.mapping_hidden[i * LATENT_DIM..(i + 1) * LATENT_DIM];
                crate::linalg::dot(row, &z.data).tanh()
            })
            .collect();
        let w = (0..LATENT_DIM)
            .map(|i| crate::linalg::dot(&self.mapping_out[i * LATENT_DIM..(i + 1) * LATENT_DIM], &h))
            .collect();
        Ok(LatentCode { kind: LatentKind::W, data: w })
    }

    fn sample_wplus_from_z(&self, z: &LatentCode) -> LatentCode {
        broadcast_wplus(&self.map_to_w(z).expect("z code")).expect("w code")
    }

    /// `count` layered codes drawn from the generator's prior.
    pub fn sample_wplus(&self, count: usize, seed: u64) -> Vec<LatentCode> {
        sample_z(count, seed).iter().map(|z| self.sample_wplus_from_z(z)).collect()
    }

    /// Layered codes from `z` scaled by `scale`, a wider or narrower prior.
    pub fn sample_wplus_scaled(&self, count: usize, seed: u64, scale: f64) -> Vec<LatentCode> {
        sample_z(count, seed)
            .iter()
            .map(|z| {
                let zz = LatentCode { kind: LatentKind::Z, data: z.data.iter().map(|v| v * scale).collect() };
                self.sample_wplus_from_z(&zz)
            })
            .collect()
    }

    /// `q = B vec(w+) + c`.
    pub fn semantic_params(&self, wplus: &LatentCode) -> Result<Vec<f64>> {
        wplus.expect_kind(LatentKind::WPlus)?;
        Ok((0..Q_DIM)
            .map(|k| {
                crate::linalg::dot(&self.semantic_basis[k * WPLUS_DIM..(k + 1) * WPLUS_DIM], &wplus.data)
                    + self.semantic_offset[k]
            })
            .collect())
    }

    /// `B^T g`: pulls a gradient on `q` back to the layered code.
    pub fn semantic_vjp(&self, grad_q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; WPLUS_DIM];
        for (k, g) in grad_q.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &self.semantic_basis[k * WPLUS_DIM..(k + 1) * WPLUS_DIM];
            for (o, b) in out.iter_mut().zip(row) {
                *o += g * b;
            }
        }
        out
    }

    /// Row `k` of `B` as a layered code direction.
    pub fn semantic_row(&self, k: usize) -> &[f64] {
        &self.semantic_basis[k * WPLUS_DIM..(k + 1) * WPLUS_DIM]
    }

    /// The minimum-norm layered code whose semantic parameters are `q`.
    pub fn wplus_for_q(&self, q: &[f64]) -> LatentCode {
        let d: Vec<f64> = q.iter().zip(&self.semantic_offset).map(|(a, b)| a - b).collect();
        LatentCode { kind: LatentKind::WPlus, data: self.semantic_vjp(&d) }
    }

    /// Derivative of each render parameter with respect to its `q` coordinate.
    fn decode_slopes(&self, q: &[f64]) -> Vec<f64> {
        let cal = &self.calibration;
        (0..Q_DIM)
            .map(|i| {
                if i < Q_EXP {
                    cal.theta_scale_deg
                } else {
                    let s = if i < Q_ID {
                        cal.expression_scale
                    } else if i < Q_NUISANCE {
                        cal.identity_scale
                    } else {
                        cal.nuisance_scale
                    };
                    let t = q[i].tanh();
                    s * (1.0 - t * t)
                }
            })
            .collect()
    }

    pub fn decode(&self, q: &[f64]) -> RenderParams {
        let cal = &self.calibration;
        let mut pose = PoseParams::default();
        for i in 0..3 {
            pose.theta[i] = cal.theta_scale_deg * q[Q_THETA + i];
        }
        for j in 0..EXP_DIM {
            pose.expression[j] = cal.expression_scale * q[Q_EXP + j].tanh();
        }
        for j in 0..ID_DIM {
            pose.identity[j] = cal.identity_scale * q[Q_ID + j].tanh();
        }
        let mut nuisance = [0.0; NUISANCE_DIM];
        for (j, n) in nuisance.iter_mut().enumerate() {
            *n = cal.nuisance_scale * q[Q_NUISANCE + j].tanh();
        }
        RenderParams { pose, nuisance }
    }

    /// Pulls a gradient on render parameters back to `q`.
    pub fn decode_vjp(&self, q: &[f64], grad_params: &[f64]) -> Vec<f64> {
        self.decode_slopes(q).iter().zip(grad_params).map(|(s, g)| s * g).collect()
    }

    /// Inverse of [`ToyGenerator::decode`]; coefficients must lie strictly inside their scales.
    pub fn encode(&self, params: &RenderParams) -> Vec<f64> {
        let cal = &self.calibration;
        let mut q = vec![0.0; Q_DIM];
        for i in 0..3 {
            q[Q_THETA + i] = params.pose.theta[i] / cal.theta_scale_deg;
        }
        for j in 0..EXP_DIM {
            q[Q_EXP + j] = (params.pose.expression[j] / cal.expression_scale).atanh();
        }
        for j in 0..ID_DIM {
            q[Q_ID + j] = (params.pose.identity[j] / cal.identity_scale).atanh();
        }
        for j in 0..NUISANCE_DIM {
            q[Q_NUISANCE + j] = (params.nuisance[j] / cal.nuisance_scale).atanh();
        }
        q
    }

    /// Ground-truth parameters of the face rendered from `wplus`.
    pub fn oracle_params(&self, wplus: &LatentCode) -> Result<PoseParams> {
        Ok(self.decode(&self.semantic_params(wplus)?).pose)
    }

    /// Projected landmark positions (pixels) of the face rendered from `q`.
    pub fn landmarks_for_q(&self, q: &[f64]) -> Vec<[f64; 2]> {
        self.renderer.landmarks(&self.decode(q))
    }

    pub fn generate(&self, wplus: &LatentCode) -> Result<FaceImage> {
        Ok(self.render_q(&self.semantic_params(wplus)?))
    }

    pub fn render_q(&self, q: &[f64]) -> FaceImage {
        self.renderer.render(&self.decode(q))
    }

    pub fn generate_with_tape(&self, wplus: &LatentCode) -> Result<RenderTape> {
        Ok(self.renderer.render_with_tape(&self.decode(&self.semantic_params(wplus)?)))
    }

    /// Gradient on `q` of `<grad_image, render_q(q)>`, from a tape of that render.
    pub fn render_vjp_q(&self, q: &[f64], tape: &RenderTape, grad_image: &[f64]) -> Vec<f64> {
        self.decode_vjp(q, &self.renderer.render_vjp(tape, grad_image).params)
    }

    /// Gradient of `<grad_image, generate(wplus)>` with respect to `wplus`.
    pub fn generate_vjp(&self, wplus: &LatentCode, grad_image: &[f64]) -> Result<Vec<f64>> {
        let q = self.semantic_params(wplus)?;
        let tape = self.renderer.render_with_tape(&self.decode(&q));
        Ok(self.semantic_vjp(&self.render_vjp_q(&q, &tape, grad_image)))
    }
}

fn blob_window(uv: &[f64; 2], radius: isize) -> (usize, usize, usize, usize) {
    let cx = uv[0].floor() as isize;
    let cy = uv[1].floor() as isize;
    let lim = IMAGE_SIZE as isize;
    let x0 = (cx - radius).clamp(0, lim) as usize;
    let x1 = (cx + radius + 1).clamp(0, lim) as usize;
    let y0 = (cy - radius).clamp(0, lim) as usize;
    let y1 = (cy + radius + 1).clamp(0, lim) as usize;
    (x0, x1, y0, y1)
}

/// Rows are `a * broadcast(u_k) / sqrt(L) + b * v_k`, with `u_k` orthonormal
/// in one layer, `v_k` orthonormal and orthogonal to every broadcast code,
/// and `a^2 + b^2 = 1`; the rows are therefore orthonormal.
fn build_semantic_basis(r: &mut rng::Rng) -> Vec<f64> {
    use nalgebra::DMatrix;
    let u = orthonormalize_columns(&DMatrix::from_vec(LATENT_DIM, Q_DIM, rng::normal_vec(r, LATENT_DIM * Q_DIM, 1.0)));
    let mut raw = DMatrix::from_vec(WPLUS_DIM, Q_DIM, rng::normal_vec(r, WPLUS_DIM * Q_DIM, 1.0));
    for k in 0..Q_DIM {
        for j in 0..LATENT_DIM {
            let mean: f64 = (0..NUM_LAYERS).map(|l| raw[(l * LATENT_DIM + j, k)]).sum::<f64>() / NUM_LAYERS as f64;
            for l in 0..NUM_LAYERS {
                raw[(l * LATENT_DIM + j, k)] -= mean;
            }
        }
    }
    let v = orthonormalize_columns(&raw);
    let a = BROADCAST_WEIGHT;
    let b = (1.0 - a * a).sqrt();
    let inv_sqrt_l = 1.0 / (NUM_LAYERS as f64).sqrt();
    let mut basis = vec![0.0; Q_DIM * WPLUS_DIM];
    for k in 0..Q_DIM {
        for l in 0..NUM_LAYERS {
            for j in 0..LATENT_DIM {
                let i = l * LATENT_DIM + j;
                basis[k * WPLUS_DIM + i] = a * u[(j, k)] * inv_sqrt_l + b * v[(i, k)];
            }
        }
    }
    basis
}
