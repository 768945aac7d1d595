//! Linear latent-space directions for facial pose and expression.
//!
//! A direction matrix maps a change in facial pose parameters (three Euler
//! angles plus expression coefficients) to a shift in a generator's layered
//! latent code. This crate trains that matrix against a small differentiable
//! face generator whose semantic map is affine with orthonormal rows, so the
//! optimal matrix is known in closed form and every claim can be checked.

pub mod checkpoint;
pub mod directions;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod image;
pub mod inversion;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod shape3d;
pub mod toygen;
pub mod training;

pub use error::{Error, Result};

/// Landmarks in the shape model (iBUG 68-point layout).
pub const NUM_LANDMARKS: usize = 68;
/// Identity coefficients `m_i`.
pub const ID_DIM: usize = 10;
/// Expression coefficients `m_e`.
pub const EXP_DIM: usize = 12;
/// Pose vector length `k = 3 + m_e`: yaw, pitch, roll, then expression.
pub const POSE_DIM: usize = 3 + EXP_DIM;
/// Width of one latent layer.
pub const LATENT_DIM: usize = 64;
/// Layers of the layered latent code, all of which receive shifts.
pub const NUM_LAYERS: usize = 8;
/// Flattened layered code length.
pub const WPLUS_DIM: usize = NUM_LAYERS * LATENT_DIM;
/// Nuisance semantic coordinates (background / lighting).
pub const NUISANCE_DIM: usize = 8;
/// Semantic parameter vector length: pose, expression, identity, nuisance.
pub const Q_DIM: usize = 3 + EXP_DIM + ID_DIM + NUISANCE_DIM;
/// Rendered image side in pixels.
pub const IMAGE_SIZE: usize = 64;

/// Human-readable names for the `POSE_DIM` attributes, in pose-vector order.
pub fn attribute_names() -> Vec<String> {
    let mut names = vec!["yaw".to_string(), "pitch".to_string(), "roll".to_string()];
    names.push("smile".to_string());
    names.push("open_mouth".to_string());
    for j in 2..EXP_DIM {
        names.push(format!("exp{j}"));
    }
    names
}
