//! Linear 3D landmark shape model, rigid pose, projection, and shape losses.
//!
//! A shape is `mean + identity_basis * p_i + expression_basis * p_e`, stored
//! vertex-major (`x0, y0, z0, x1, ...`). Both bases have orthonormal columns,
//! are mutually orthogonal, and are orthogonal to rigid motions of the mean
//! template, so identity, expression and head orientation are separable.
//!
//! Coordinates: `x` to the viewer's right, `y` up, `z` toward the camera.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::linalg::orthonormalize_columns;
use crate::rng;
use crate::{EXP_DIM, ID_DIM, NUM_LANDMARKS, POSE_DIM};

/// 1-indexed eyelid landmark pairs (upper/lower lid and eye corners).
pub const EYE_PAIRS: [(usize, usize); 6] = [(37, 40), (38, 42), (39, 41), (43, 46), (44, 48), (45, 47)];

/// 1-indexed lip landmark pairs (outer and inner lip contours).
pub const MOUTH_PAIRS: [(usize, usize); 10] = [
    (49, 55),
    (50, 60),
    (51, 59),
    (52, 58),
    (53, 57),
    (54, 56),
    (61, 65),
    (62, 68),
    (63, 67),
    (64, 66),
];

/// Pixels per shape unit in the orthographic projection.
pub const PROJECTION_SCALE: f64 = 14.0;
/// Image coordinate of the projected origin. Pixel `i` covers `[i, i + 1)`,
/// so this is the center of a 64-pixel image.
pub const IMAGE_CENTER: f64 = 32.0;

const SHAPE_LEN: usize = 3 * NUM_LANDMARKS;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Shape3D {
    pub vertices: Vec<[f64; 3]>,
}

impl Shape3D {
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != SHAPE_LEN {
            return Err(contract(format!("shape needs {SHAPE_LEN} values, got {}", flat.len())));
        }
        Ok(Self { vertices: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

/// Facial pose plus identity, in the model's raw units: Euler angles in
/// degrees, expression and identity coefficients unitless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: [f64; 3],
    pub expression: [f64; EXP_DIM],
    pub identity: [f64; ID_DIM],
}

impl Default for PoseParams {
    fn default() -> Self {
        Self { theta: [0.0; 3], expression: [0.0; EXP_DIM], identity: [0.0; ID_DIM] }
    }
}

impl PoseParams {
    /// Number of values in [`PoseParams::to_vec`].
    pub const LEN: usize = 3 + EXP_DIM + ID_DIM;

    /// The direction-space vector `[theta, expression]`; identity is excluded.
    pub fn pose_vector(&self) -> [f64; POSE_DIM] {
        let mut p = [0.0; POSE_DIM];
        p[..3].copy_from_slice(&self.theta);
        p[3..].copy_from_slice(&self.expression);
        p
    }

    pub fn with_pose_vector(&self, p: &[f64]) -> Self {
        let mut out = self.clone();
        out.theta.copy_from_slice(&p[..3]);
        out.expression.copy_from_slice(&p[3..POSE_DIM]);
        out
    }

    /// `[theta, expression, identity]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.expression);
        v.extend_from_slice(&self.identity);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(contract(format!("pose params need {} values, got {}", Self::LEN, v.len())));
        }
        let mut p = Self::default();
        p.theta.copy_from_slice(&v[..3]);
        p.expression.copy_from_slice(&v[3..3 + EXP_DIM]);
        p.identity.copy_from_slice(&v[3 + EXP_DIM..]);
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPairTable {
    pub eye_pairs: Vec<(usize, usize)>,
    pub mouth_pairs: Vec<(usize, usize)>,
}

impl LandmarkPairTable {
    pub fn new(eye_pairs: Vec<(usize, usize)>, mouth_pairs: Vec<(usize, usize)>) -> Result<Self> {
        validate_pairs(&eye_pairs)?;
        validate_pairs(&mouth_pairs)?;
        Ok(Self { eye_pairs, mouth_pairs })
    }

    /// The eyelid and lip tables used by the reenactment loss.
    pub fn standard() -> Self {
        Self { eye_pairs: EYE_PAIRS.to_vec(), mouth_pairs: MOUTH_PAIRS.to_vec() }
    }
}

impl Default for LandmarkPairTable {
    fn default() -> Self {
        Self::standard()
    }
}

fn validate_pairs(pairs: &[(usize, usize)]) -> Result<()> {
    for &(i, j) in pairs {
        if !(1..=NUM_LANDMARKS).contains(&i) || !(1..=NUM_LANDMARKS).contains(&j) {
            return Err(contract(format!("landmark pair ({i}, {j}) outside 1..={NUM_LANDMARKS}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    /// Centered frontal template, vertex-major, length `3 * 68`.
    pub mean_shape: Vec<f64>,
    /// Row-major `3N x m_i`.
    pub identity_basis: Vec<f64>,
    /// Row-major `3N x m_e`.
    pub expression_basis: Vec<f64>,
    pub seed: u64,
}

impl ShapeModel {
    /// Builds the template and seeded bases. The first two expression columns
    /// are seeded from hand-shaped smile and mouth-opening deformations; the
    /// rest are region-weighted noise. Columns are orthonormalized jointly
    /// against rigid motions, expression first, then identity.
    pub fn new(seed: u64) -> Self {
        let mean = canonical_template();
        let mut rng = rng::derive(seed, 1);
        let n = SHAPE_LEN;

        let mut raw = DMatrix::<f64>::zeros(n, 6 + EXP_DIM + ID_DIM);
        for (v, p) in mean.iter().enumerate() {
            for a in 0..3 {
                raw[(3 * v + a, a)] = 1.0;
            }
            let [x, y, z] = *p;
            let rot = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
            for (r, col) in rot.iter().enumerate() {
                for a in 0..3 {
                    raw[(3 * v + a, 3 + r)] = col[a];
                }
            }
        }

        let exp_raw = expression_raw_columns(&mean, &mut rng);
        for (j, col) in exp_raw.iter().enumerate() {
            for r in 0..n {
                raw[(r, 6 + j)] = col[r];
            }
        }
        let id_raw = identity_raw_columns(&mean, &mut rng);
        for (j, col) in id_raw.iter().enumerate() {
            for r in 0..n {
                raw[(r, 6 + EXP_DIM + j)] = col[r];
            }
        }

        let q = orthonormalize_columns(&raw);
        let mut expression_basis = vec![0.0; n * EXP_DIM];
        let mut identity_basis = vec![0.0; n * ID_DIM];
        for r in 0..n {
            for j in 0..EXP_DIM {
                expression_basis[r * EXP_DIM + j] = q[(r, 6 + j)];
            }
            for j in 0..ID_DIM {
                identity_basis[r * ID_DIM + j] = q[(r, 6 + EXP_DIM + j)];
            }
        }
        let mean_shape = mean.iter().flat_map(|v| v.iter().copied()).collect();
        Self { mean_shape, identity_basis, expression_basis, seed }
    }

    pub fn mean(&self) -> Shape3D {
        Shape3D::from_flat(&self.mean_shape).expect("mean shape length")
    }

    /// Column `j` of the identity basis, as a flat `3N` vector.
    pub fn identity_column(&self, j: usize) -> Vec<f64> {
        (0..SHAPE_LEN).map(|r| self.identity_basis[r * ID_DIM + j]).collect()
    }

    pub fn expression_column(&self, j: usize) -> Vec<f64> {
        (0..SHAPE_LEN).map(|r| self.expression_basis[r * EXP_DIM + j]).collect()
    }

    /// `mean + S_i p_i + S_e p_e`.
    pub fn reconstruct_shape(&self, identity: &[f64], expression: &[f64]) -> Result<Shape3D> {
        if identity.len() != ID_DIM || expression.len() != EXP_DIM {
            return Err(contract(format!(
                "coefficient lengths ({}, {}) do not match basis widths ({ID_DIM}, {EXP_DIM})",
                identity.len(),
                expression.len()
            )));
        }
        let mut flat = self.mean_shape.clone();
        for (r, out) in flat.iter_mut().enumerate() {
            let id_row = &self.identity_basis[r * ID_DIM..(r + 1) * ID_DIM];
            let ex_row = &self.expression_basis[r * EXP_DIM..(r + 1) * EXP_DIM];
            let mut acc = 0.0;
            for j in 0..ID_DIM {
                acc += id_row[j] * identity[j];
            }
            for j in 0..EXP_DIM {
                acc += ex_row[j] * expression[j];
            }
            *out += acc;
        }
        Shape3D::from_flat(&flat)
    }

    /// Pulls a gradient on the reconstructed shape back to
    /// `(d/d identity, d/d expression)`.
    pub fn reconstruct_vjp(&self, grad_shape: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>) {
        let mut gi = vec![0.0; ID_DIM];
        let mut ge = vec![0.0; EXP_DIM];
        for (v, g) in grad_shape.iter().enumerate() {
            for a in 0..3 {
                let r = 3 * v + a;
                let ga = g[a];
                if ga == 0.0 {
                    continue;
                }
                for j in 0..ID_DIM {
                    gi[j] += self.identity_basis[r * ID_DIM + j] * ga;
                }
                for j in 0..EXP_DIM {
                    ge[j] += self.expression_basis[r * EXP_DIM + j] * ga;
                }
            }
        }
        (gi, ge)
    }

    /// Reconstructs and poses the shape described by `params`.
    pub fn posed_shape(&self, params: &PoseParams) -> Shape3D {
        let s = self
            .reconstruct_shape(&params.identity, &params.expression)
            .expect("fixed-size coefficients");
        apply_pose(&s, params.theta)
    }
}

/// `R = R_roll * R_pitch * R_yaw` for `theta = (yaw, pitch, roll)` in degrees.
/// Yaw turns about `y`, pitch about `x`, roll about `z`.
pub fn rotation_matrix(theta: [f64; 3]) -> Mat3 {
    let [ry, rx, rz] = axis_rotations(theta);
    matmul3(&matmul3(&rz, &rx), &ry)
}

/// Derivatives of [`rotation_matrix`] with respect to each angle, per degree.
pub fn rotation_derivatives(theta: [f64; 3]) -> [Mat3; 3] {
    let [ry, rx, rz] = axis_rotations(theta);
    let [dy, dx, dz] = axis_rotation_derivatives(theta);
    [
        matmul3(&matmul3(&rz, &rx), &dy),
        matmul3(&matmul3(&rz, &dx), &ry),
        matmul3(&matmul3(&dz, &rx), &ry),
    ]
}

fn axis_rotations(theta: [f64; 3]) -> [Mat3; 3] {
    let (sy, cy) = theta[0].to_radians().sin_cos();
    let (sx, cx) = theta[1].to_radians().sin_cos();
    let (sz, cz) = theta[2].to_radians().sin_cos();
    [
        [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]],
        [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]],
        [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]],
    ]
}

fn axis_rotation_derivatives(theta: [f64; 3]) -> [Mat3; 3] {
    let k = std::f64::consts::PI / 180.0;
    let (sy, cy) = theta[0].to_radians().sin_cos();
    let (sx, cx) = theta[1].to_radians().sin_cos();
    let (sz, cz) = theta[2].to_radians().sin_cos();
    [
        [[-sy * k, 0.0, cy * k], [0.0, 0.0, 0.0], [-cy * k, 0.0, -sy * k]],
        [[0.0, 0.0, 0.0], [0.0, -sx * k, -cx * k], [0.0, cx * k, -sx * k]],
        [[-sz * k, -cz * k, 0.0], [cz * k, -sz * k, 0.0], [0.0, 0.0, 0.0]],
    ]
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn transpose3(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn apply_rotation(shape: &Shape3D, r: &Mat3) -> Shape3D {
    Shape3D { vertices: shape.vertices.iter().map(|v| mat_vec3(r, v)).collect() }
}

pub fn mat_vec3(r: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Rotates the shape about the origin by [`rotation_matrix`]`(theta)`.
pub fn apply_pose(shape: &Shape3D, theta: [f64; 3]) -> Shape3D {
    apply_rotation(shape, &rotation_matrix(theta))
}

/// Orthographic projection into pixel coordinates `(u, v)`: drop `z`, scale by
/// [`PROJECTION_SCALE`], flip `y` so that image rows grow downward, and move
/// the origin to [`IMAGE_CENTER`].
pub fn project_landmarks(shape: &Shape3D) -> Vec<[f64; 2]> {
    shape
        .vertices
        .iter()
        .map(|v| [IMAGE_CENTER + PROJECTION_SCALE * v[0], IMAGE_CENTER - PROJECTION_SCALE * v[1]])
        .collect()
}

/// `||S_r - S_gt||_1` over all `3N` coordinates.
pub fn shape_loss(reenacted: &Shape3D, gt: &Shape3D) -> f64 {
    reenacted
        .vertices
        .iter()
        .zip(&gt.vertices)
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs())
        .sum()
}

/// Gradient of [`shape_loss`] with respect to `reenacted` (sign, 0 at ties).
pub fn shape_loss_grad(reenacted: &Shape3D, gt: &Shape3D) -> Vec<[f64; 3]> {
    reenacted
        .vertices
        .iter()
        .zip(&gt.vertices)
        .map(|(a, b)| [sign(a[0] - b[0]), sign(a[1] - b[1]), sign(a[2] - b[2])])
        .collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1_point_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// `sum |d(S_r(i), S_r(j)) - d(S_gt(i), S_gt(j))|` over 1-indexed pairs, with
/// `d` the L1 distance between the two landmarks.
pub fn pair_distance_loss(reenacted: &Shape3D, gt: &Shape3D, pairs: &[(usize, usize)]) -> Result<f64> {
    validate_pairs(pairs)?;
    Ok(pairs
        .iter()
        .map(|&(i, j)| {
            let dr = l1_point_distance(&reenacted.vertices[i - 1], &reenacted.vertices[j - 1]);
            let dg = l1_point_distance(&gt.vertices[i - 1], &gt.vertices[j - 1]);
            (dr - dg).abs()
        })
        .sum())
}

/// Gradient of [`pair_distance_loss`] with respect to `reenacted`.
pub fn pair_distance_loss_grad(
    reenacted: &Shape3D,
    gt: &Shape3D,
    pairs: &[(usize, usize)],
) -> Result<Vec<[f64; 3]>> {
    validate_pairs(pairs)?;
    let mut g = vec![[0.0; 3]; reenacted.vertices.len()];
    for &(i, j) in pairs {
        let a = reenacted.vertices[i - 1];
        let b = reenacted.vertices[j - 1];
        let dr = l1_point_distance(&a, &b);
        let dg = l1_point_distance(&gt.vertices[i - 1], &gt.vertices[j - 1]);
        let outer = sign(dr - dg);
        if outer == 0.0 {
            continue;
        }
        for k in 0..3 {
            let s = outer * sign(a[k] - b[k]);
            g[i - 1][k] += s;
            g[j - 1][k] -= s;
        }
    }
    Ok(g)
}

/// `L_sh + L_eye + L_mouth` with unit weights.
pub fn reenactment_loss(reenacted: &Shape3D, gt: &Shape3D, pairs: &LandmarkPairTable) -> f64 {
    reenactment_loss_parts(reenacted, gt, pairs).iter().sum()
}

/// `[L_sh, L_eye, L_mouth]`.
pub fn reenactment_loss_parts(reenacted: &Shape3D, gt: &Shape3D, pairs: &LandmarkPairTable) -> [f64; 3] {
    [
        shape_loss(reenacted, gt),
        pair_distance_loss(reenacted, gt, &pairs.eye_pairs).expect("validated table"),
        pair_distance_loss(reenacted, gt, &pairs.mouth_pairs).expect("validated table"),
    ]
}

/// Gradient of [`reenactment_loss`] with respect to `reenacted`.
pub fn reenactment_loss_grad(reenacted: &Shape3D, gt: &Shape3D, pairs: &LandmarkPairTable) -> Vec<[f64; 3]> {
    let mut g = shape_loss_grad(reenacted, gt);
    for table in [&pairs.eye_pairs, &pairs.mouth_pairs] {
        let gp = pair_distance_loss_grad(reenacted, gt, table).expect("validated table");
        for (a, b) in g.iter_mut().zip(gp) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
    g
}

/// Gradient with respect to `(unposed shape, theta)` of a scalar whose
/// gradient on the posed shape `apply_pose(shape, theta)` is `grad_posed`.
pub fn apply_pose_vjp(shape: &Shape3D, theta: [f64; 3], grad_posed: &[[f64; 3]]) -> (Vec<[f64; 3]>, [f64; 3]) {
    let rt = transpose3(&rotation_matrix(theta));
    let dr = rotation_derivatives(theta);
    let mut gtheta = [0.0; 3];
    let mut gs = Vec::with_capacity(shape.vertices.len());
    for (v, g) in shape.vertices.iter().zip(grad_posed) {
        gs.push(mat_vec3(&rt, g));
        for (k, dk) in dr.iter().enumerate() {
            let dv = mat_vec3(dk, v);
            gtheta[k] += dv[0] * g[0] + dv[1] * g[1] + dv[2] * g[2];
        }
    }
    (gs, gtheta)
}

/// Mirror pairs (1-indexed) under `x -> -x`; landmarks on the midline are absent.
const MIRROR: [(usize, usize); 29] = [
    (1, 17),
    (2, 16),
    (3, 15),
    (4, 14),
    (5, 13),
    (6, 12),
    (7, 11),
    (8, 10),
    (18, 27),
    (19, 26),
    (20, 25),
    (21, 24),
    (22, 23),
    (32, 36),
    (33, 35),
    (37, 46),
    (38, 45),
    (39, 44),
    (40, 43),
    (41, 48),
    (42, 47),
    (49, 55),
    (50, 54),
    (60, 56),
    (59, 57),
    (61, 65),
    (62, 64),
    (68, 66),
    (51, 53),
];

/// Frontal 68-landmark template, exactly mirror-symmetric about `x = 0` and
/// centered at the origin.
pub fn canonical_template() -> Vec<[f64; 3]> {
    let mut p = [[f64::NAN; 3]; NUM_LANDMARKS + 1];
    for k in 1..=9usize {
        let ang = std::f64::consts::PI * (k - 1) as f64 / 16.0;
        let x = if k == 9 { 0.0 } else { -1.2 * ang.cos() };
        p[k] = [x, 0.25 - 1.55 * ang.sin(), -0.55 + 0.45 * ang.sin()];
    }
    for k in 18..=22usize {
        let t = (k - 18) as f64 / 4.0;
        p[k] = [-0.95 + 0.75 * t, 0.6 + 0.1 * (std::f64::consts::PI * t).sin() + 0.02 * t, 0.05 + 0.12 * t];
    }
    for k in 28..=31usize {
        let t = (k - 28) as f64;
        p[k] = [0.0, 0.38 - 0.18 * t, 0.25 + 0.1 * t];
    }
    p[32] = [-0.25, -0.30, 0.28];
    p[33] = [-0.12, -0.34, 0.34];
    p[34] = [0.0, -0.36, 0.38];
    p[37] = [-0.72, 0.30, 0.02];
    p[38] = [-0.59, 0.37, 0.08];
    p[39] = [-0.41, 0.37, 0.08];
    p[40] = [-0.28, 0.30, 0.06];
    p[41] = [-0.42, 0.23, 0.07];
    p[42] = [-0.58, 0.23, 0.065];
    p[49] = [-0.46, -0.74, 0.12];
    p[50] = [-0.30, -0.65, 0.20];
    p[51] = [-0.13, -0.61, 0.25];
    p[52] = [0.0, -0.63, 0.27];
    p[58] = [0.0, -0.93, 0.24];
    p[59] = [-0.12, -0.92, 0.23];
    p[60] = [-0.29, -0.86, 0.19];
    p[61] = [-0.34, -0.755, 0.15];
    p[62] = [-0.14, -0.71, 0.22];
    p[63] = [0.0, -0.72, 0.23];
    p[67] = [0.0, -0.81, 0.22];
    p[68] = [-0.15, -0.80, 0.21];
    for &(l, r) in MIRROR.iter() {
        let [x, y, z] = p[l];
        p[r] = [-x, y, z];
    }
    let mut pts: Vec<[f64; 3]> = p[1..].to_vec();
    debug_assert!(pts.iter().all(|v| v.iter().all(|c| c.is_finite())));
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for v in &pts {
        for a in 0..3 {
            c[a] += v[a] / n;
        }
    }
    // x is already centered by symmetry; keep it exactly so.
    c[0] = 0.0;
    for v in &mut pts {
        for a in 0..3 {
            v[a] -= c[a];
        }
    }
    pts
}

fn region(k: usize) -> usize {
    match k {
        1..=17 => 0,
        18..=27 => 1,
        28..=36 => 2,
        37..=48 => 3,
        _ => 4,
    }
}

fn put(col: &mut [f64], k: usize, d: [f64; 3]) {
    for a in 0..3 {
        col[3 * (k - 1) + a] += d[a];
    }
}

fn expression_raw_columns(mean: &[[f64; 3]], rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut cols = Vec::with_capacity(EXP_DIM);

    let mut smile = vec![0.0; SHAPE_LEN];
    for (l, r, dx, dy) in [(49, 55, 0.5, 0.45), (50, 54, 0.2, 0.2), (60, 56, 0.25, 0.25), (61, 65, 0.35, 0.35)] {
        put(&mut smile, l, [-dx, dy, -0.1 * dx]);
        put(&mut smile, r, [dx, dy, -0.1 * dx]);
    }
    for (l, r) in [(4, 14), (5, 13)] {
        put(&mut smile, l, [-0.05, 0.05, 0.0]);
        put(&mut smile, r, [0.05, 0.05, 0.0]);
    }
    cols.push(smile);

    let mut open = vec![0.0; SHAPE_LEN];
    for (k, dy) in [(58, -0.6), (57, -0.55), (59, -0.55), (56, -0.4), (60, -0.4), (49, -0.15), (55, -0.15)] {
        put(&mut open, k, [0.0, dy, 0.0]);
    }
    for k in 66..=68 {
        put(&mut open, k, [0.0, -0.55, 0.0]);
    }
    for k in 51..=53 {
        put(&mut open, k, [0.0, 0.08, 0.0]);
    }
    for k in 62..=64 {
        put(&mut open, k, [0.0, 0.05, 0.0]);
    }
    for k in 7..=11 {
        put(&mut open, k, [0.0, if (8..=10).contains(&k) { -0.35 } else { -0.3 }, 0.02]);
    }
    cols.push(open);

    for col in cols.iter_mut() {
        let noise = rng::normal_vec(rng, SHAPE_LEN, 0.03);
        for k in 49..=68 {
            for a in 0..3 {
                col[3 * (k - 1) + a] += noise[3 * (k - 1) + a];
            }
        }
    }

    // eyes, brows, mouth, eyes, brows, mouth, jaw, nose, eyes, mouth
    let primaries = [3usize, 1, 4, 3, 1, 4, 0, 2, 3, 4];
    for &primary in primaries.iter().take(EXP_DIM - 2) {
        let noise = rng::normal_vec(rng, SHAPE_LEN, 1.0);
        let col = (0..SHAPE_LEN)
            .map(|r| {
                let k = r / 3 + 1;
                let w = if region(k) == primary { 1.0 } else { 0.15 };
                noise[r] * w
            })
            .collect();
        cols.push(col);
    }
    debug_assert_eq!(mean.len(), NUM_LANDMARKS);
    cols
}

fn identity_raw_columns(mean: &[[f64; 3]], rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut cols = Vec::with_capacity(ID_DIM);
    // face width, face length, depth
    for axis in 0..3 {
        let mut c = vec![0.0; SHAPE_LEN];
        for (v, p) in mean.iter().enumerate() {
            c[3 * v + axis] = p[axis];
        }
        cols.push(c);
    }
    // eye spacing
    let mut c = vec![0.0; SHAPE_LEN];
    for k in 37..=48 {
        put(&mut c, k, [mean[k - 1][0].signum() * 0.3, 0.0, 0.0]);
    }
    cols.push(c);
    // jaw width
    let mut c = vec![0.0; SHAPE_LEN];
    for k in 2..=16 {
        put(&mut c, k, [mean[k - 1][0] * 0.4, 0.0, 0.0]);
    }
    cols.push(c);
    while cols.len() < ID_DIM {
        cols.push(rng::normal_vec(rng, SHAPE_LEN, 1.0));
    }
    cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_shape(seed: u64) -> Shape3D {
        let mut r = rng::seeded(seed);
        Shape3D { vertices: (0..NUM_LANDMARKS).map(|_| [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]).collect() }
    }

    #[test]
    fn zero_coefficients_give_mean() {
        let m = ShapeModel::new(3);
        let s = m.reconstruct_shape(&[0.0; ID_DIM], &[0.0; EXP_DIM]).unwrap();
        assert_eq!(s.to_flat(), m.mean_shape);
    }

    #[test]
    fn unit_identity_adds_first_column() {
        let m = ShapeModel::new(3);
        let mut pi = [0.0; ID_DIM];
        pi[0] = 1.0;
        let s = m.reconstruct_shape(&pi, &[0.0; EXP_DIM]).unwrap().to_flat();
        let col = m.identity_column(0);
        for r in 0..SHAPE_LEN {
            assert!((s[r] - (m.mean_shape[r] + col[r])).abs() < 1e-15);
        }
    }

    #[test]
    fn random_coefficients_match_per_column_sum() {
        let m = ShapeModel::new(11);
        let mut r = rng::seeded(5);
        let pi: Vec<f64> = (0..ID_DIM).map(|_| r.random_range(-2.0..2.0)).collect();
        let pe: Vec<f64> = (0..EXP_DIM).map(|_| r.random_range(-2.0..2.0)).collect();
        let s = m.reconstruct_shape(&pi, &pe).unwrap().to_flat();
        let mut oracle = m.mean_shape.clone();
        for (j, c) in pi.iter().enumerate() {
            for (o, b) in oracle.iter_mut().zip(m.identity_column(j)) {
                *o += c * b;
            }
        }
        for (j, c) in pe.iter().enumerate() {
            for (o, b) in oracle.iter_mut().zip(m.expression_column(j)) {
                *o += c * b;
            }
        }
        for (a, b) in s.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_coefficient_length_is_contract_error() {
        let m = ShapeModel::new(1);
        assert!(matches!(m.reconstruct_shape(&[0.0; 3], &[0.0; EXP_DIM]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn model_is_deterministic_in_seed() {
        assert_eq!(ShapeModel::new(9), ShapeModel::new(9));
        assert_ne!(ShapeModel::new(9).identity_basis, ShapeModel::new(10).identity_basis);
    }

    #[test]
    fn template_is_centered_and_symmetric() {
        let t = canonical_template();
        let mut c = [0.0; 3];
        for v in &t {
            for a in 0..3 {
                c[a] += v[a];
            }
        }
        for a in c {
            assert!(a.abs() < 1e-12);
        }
        for &(l, r) in MIRROR.iter() {
            assert!((t[l - 1][0] + t[r - 1][0]).abs() < 1e-15);
            assert_eq!(t[l - 1][1], t[r - 1][1]);
        }
    }

    #[test]
    fn smile_and_open_mouth_dominate_mouth_region() {
        let m = ShapeModel::new(2);
        for j in 0..2 {
            let col = m.expression_column(j);
            let mouth: f64 = (48..68).flat_map(|v| (0..3).map(move |a| 3 * v + a)).map(|r| col[r] * col[r]).sum();
            assert!(mouth > 0.5, "column {j} mouth energy {mouth}");
        }
    }

    #[test]
    fn identity_rotation_is_noop() {
        let s = random_shape(1);
        assert_eq!(apply_pose(&s, [0.0; 3]), s);
    }

    #[test]
    fn half_roll_negates_xy() {
        let s = random_shape(2);
        let r = apply_pose(&s, [0.0, 0.0, 180.0]);
        for (a, b) in s.vertices.iter().zip(&r.vertices) {
            assert!((a[0] + b[0]).abs() < 1e-12);
            assert!((a[1] + b[1]).abs() < 1e-12);
            assert!((a[2] - b[2]).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_rotation_restores_shape() {
        let s = random_shape(3);
        let posed = apply_pose(&s, [30.0, 10.0, -5.0]);
        // The inverse of Rz Rx Ry is Ry^T Rx^T Rz^T.
        let [ry, rx, rz] = axis_rotations([-30.0, -10.0, 5.0]);
        let inv = matmul3(&matmul3(&ry, &rx), &rz);
        let back = apply_rotation(&posed, &inv);
        for (a, b) in s.vertices.iter().zip(&back.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_of_origin_is_center_and_template_is_symmetric() {
        let origin = Shape3D { vertices: vec![[0.0; 3]] };
        assert_eq!(project_landmarks(&origin), vec![[IMAGE_CENTER, IMAGE_CENTER]]);
        let m = ShapeModel::new(0);
        let uv = project_landmarks(&m.mean());
        for (l, r) in [(37, 46), (38, 45), (39, 44), (40, 43), (41, 48), (42, 47)] {
            assert!(((uv[l - 1][0] - IMAGE_CENTER) + (uv[r - 1][0] - IMAGE_CENTER)).abs() < 1e-9);
            assert!((uv[l - 1][1] - uv[r - 1][1]).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_matches_hand_computation() {
        let s = apply_pose(&random_shape(4), [12.0, -7.0, 3.0]);
        let uv = project_landmarks(&s);
        for v in [0, 20, 67] {
            let [x, y, _] = s.vertices[v];
            assert_eq!(uv[v][0], 32.0 + 14.0 * x);
            assert_eq!(uv[v][1], 32.0 - 14.0 * y);
        }
    }

    #[test]
    fn shape_loss_cases() {
        let a = random_shape(5);
        assert_eq!(shape_loss(&a, &a), 0.0);
        let mut b = a.clone();
        b.vertices[10][1] += 0.5;
        assert!((shape_loss(&a, &b) - 0.5).abs() < 1e-12);
        let c = random_shape(6);
        let mut oracle = 0.0;
        let fa = a.to_flat();
        let fc = c.to_flat();
        for i in 0..fa.len() {
            oracle += (fa[i] - fc[i]).abs();
        }
        assert!((shape_loss(&a, &c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn eyelid_opening_shows_in_pair_loss() {
        let m = ShapeModel::new(0);
        let r = m.mean();
        let mut gt = r.clone();
        gt.vertices[41][1] -= 0.2; // landmark 42, lower lid under 38
        let l = pair_distance_loss(&r, &gt, &EYE_PAIRS).unwrap();
        assert!((l - 0.2).abs() < 1e-12, "{l}");
        assert_eq!(pair_distance_loss(&r, &r, &EYE_PAIRS).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_pair_is_rejected() {
        let s = random_shape(1);
        assert!(pair_distance_loss(&s, &s, &[(0, 3)]).is_err());
        assert!(pair_distance_loss(&s, &s, &[(3, 69)]).is_err());
        assert!(LandmarkPairTable::new(vec![(1, 70)], vec![]).is_err());
    }

    #[test]
    fn rotation_derivatives_match_finite_differences() {
        let th = [20.0, -15.0, 8.0];
        let d = rotation_derivatives(th);
        let h = 1e-5;
        for k in 0..3 {
            let mut p = th;
            let mut m = th;
            p[k] += h;
            m[k] -= h;
            let rp = rotation_matrix(p);
            let rm = rotation_matrix(m);
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                    assert!((fd - d[k][i][j]).abs() < 1e-9);
                }
            }
        }
    }
}
