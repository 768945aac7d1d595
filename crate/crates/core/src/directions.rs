//! The direction matrix `A`, pose-distribution calibration, and the latent
//! arithmetic `w_r = w_s + A (p~_t - p~_s)`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Persist};
use crate::error::{contract, Result};
use crate::estimator::PoseRegressor;
use crate::linalg::quantile;
use crate::rng;
use crate::shape3d::PoseParams;
use crate::toygen::{LatentCode, LatentKind, ToyGenerator, Q_THETA};
use crate::{LATENT_DIM, NUM_LAYERS, POSE_DIM, WPLUS_DIM};

/// Smallest sample count [`estimate_p_stats`] accepts.
pub const MIN_STATS_SAMPLES: usize = 100;
pub const DEFAULT_RANGE_BOUND: f64 = 1.0;
pub const LOW_QUANTILE: f64 = 0.01;
pub const HIGH_QUANTILE: f64 = 0.99;

/// Per-attribute 1%/99% quantiles of the pose vector and the common bound `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub a: f64,
    pub samples: usize,
    pub seed: u64,
}

impl PoseStats {
    pub fn new(low: Vec<f64>, high: Vec<f64>, a: f64) -> Result<Self> {
        if low.len() != POSE_DIM || high.len() != POSE_DIM {
            return Err(contract(format!("pose stats need {POSE_DIM} bounds per side")));
        }
        if let Some(i) = (0..POSE_DIM).find(|&i| !(low[i] < high[i])) {
            return Err(contract(format!("attribute {i}: low {} is not below high {}", low[i], high[i])));
        }
        if !(a > 0.0) {
            return Err(contract("range bound a must be positive"));
        }
        Ok(Self { low, high, a, samples: 0, seed: 0 })
    }

    /// Quantiles of the given pose vectors.
    pub fn from_samples(poses: &[[f64; POSE_DIM]], a: f64) -> Result<Self> {
        if poses.len() < MIN_STATS_SAMPLES {
            return Err(contract(format!("{} samples are too few for stable quantiles (need {MIN_STATS_SAMPLES})", poses.len())));
        }
        let mut low = Vec::with_capacity(POSE_DIM);
        let mut high = Vec::with_capacity(POSE_DIM);
        for i in 0..POSE_DIM {
            let col: Vec<f64> = poses.iter().map(|p| p[i]).collect();
            low.push(quantile(&col, LOW_QUANTILE));
            high.push(quantile(&col, HIGH_QUANTILE));
        }
        let mut s = Self::new(low, high, a)?;
        s.samples = poses.len();
        Ok(s)
    }

    pub fn range(&self, i: usize) -> f64 {
        self.high[i] - self.low[i]
    }

    /// Maps `[low, high]` affinely onto `[-a, a]` per attribute.
    pub fn rescale(&self, p: &[f64]) -> Vec<f64> {
        assert_eq!(p.len(), POSE_DIM, "pose vector length");
        (0..POSE_DIM).map(|i| self.a * (2.0 * p[i] - self.low[i] - self.high[i]) / self.range(i)).collect()
    }

    pub fn unscale(&self, pt: &[f64]) -> Vec<f64> {
        assert_eq!(pt.len(), POSE_DIM, "pose vector length");
        (0..POSE_DIM).map(|i| 0.5 * (pt[i] / self.a * self.range(i) + self.low[i] + self.high[i])).collect()
    }

    /// `d p~_i / d p_i`.
    pub fn slope(&self, i: usize) -> f64 {
        2.0 * self.a / self.range(i)
    }
}

/// Samples `n` prior codes, estimates their pose with `reg`, and takes quantiles.
pub fn estimate_p_stats(gen: &ToyGenerator, reg: &PoseRegressor, n: usize, seed: u64) -> Result<PoseStats> {
    if n < MIN_STATS_SAMPLES {
        return Err(contract(format!("{n} samples are too few for stable quantiles (need {MIN_STATS_SAMPLES})")));
    }
    let poses: Vec<[f64; POSE_DIM]> = gen
        .sample_wplus(n, seed)
        .iter()
        .map(|c| reg.estimate(&gen.generate(c).expect("prior code is layered")).pose_vector())
        .collect();
    let mut stats = PoseStats::from_samples(&poses, DEFAULT_RANGE_BOUND)?;
    stats.seed = seed;
    Ok(stats)
}

/// `A`, row-major `WPLUS_DIM x POSE_DIM`, with the calibration it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionMatrix {
    pub matrix: Vec<f64>,
    pub stats: PoseStats,
}

impl DirectionMatrix {
    pub const ROWS: usize = WPLUS_DIM;
    pub const COLS: usize = POSE_DIM;

    pub fn new(matrix: Vec<f64>, stats: PoseStats) -> Result<Self> {
        if matrix.len() != Self::ROWS * Self::COLS {
            return Err(contract(format!("direction matrix needs {} entries, got {}", Self::ROWS * Self::COLS, matrix.len())));
        }
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(contract("direction matrix has non-finite entries"));
        }
        Ok(Self { matrix, stats })
    }

    /// i.i.d. normal entries with standard deviation `std`.
    pub fn random(stats: PoseStats, std: f64, seed: u64) -> Self {
        let mut r = rng::derive(seed, 0xa1);
        Self { matrix: rng::normal_vec(&mut r, Self::ROWS * Self::COLS, std), stats }
    }

    /// `A* = B_pose^T`: column `j` is row `j` of the semantic basis, so a unit
    /// step along it moves semantic coordinate `j` by one and nothing else.
    pub fn oracle(gen: &ToyGenerator, stats: PoseStats) -> Self {
        let mut matrix = vec![0.0; Self::ROWS * Self::COLS];
        for j in 0..POSE_DIM {
            for (r, v) in gen.semantic_row(Q_THETA + j).iter().enumerate() {
                matrix[r * Self::COLS + j] = *v;
            }
        }
        Self { matrix, stats }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..Self::ROWS).map(|r| self.matrix[r * Self::COLS + j]).collect()
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(Self::ROWS, Self::COLS, &self.matrix)
    }

    /// `A dp~` as a flat layered shift.
    pub fn delta_w(&self, dp: &[f64]) -> Result<Vec<f64>> {
        if dp.len() != POSE_DIM {
            return Err(contract(format!("pose delta needs {POSE_DIM} values, got {}", dp.len())));
        }
        Ok(self.matrix.chunks_exact(Self::COLS).map(|row| crate::linalg::dot(row, dp)).collect())
    }

    /// `A^T g`: pulls a gradient on the layered shift back to the pose delta.
    pub fn delta_w_vjp(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; POSE_DIM];
        for (row, gr) in self.matrix.chunks_exact(Self::COLS).zip(g) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += gr * a;
            }
        }
        out
    }

    /// The rescaled difference `p~_t - p~_s` of two raw pose vectors.
    pub fn rescaled_delta(&self, p_s: &[f64], p_t: &[f64]) -> Vec<f64> {
        let (s, t) = (self.stats.rescale(p_s), self.stats.rescale(p_t));
        t.iter().zip(&s).map(|(a, b)| a - b).collect()
    }

    /// `w_s + A (p~_t - p~_s)` with raw pose vectors.
    pub fn reenact_code(&self, w_s: &LatentCode, p_s: &[f64], p_t: &[f64]) -> Result<LatentCode> {
        w_s.expect_kind(LatentKind::WPlus)?;
        self.shift(w_s, &self.rescaled_delta(p_s, p_t))
    }

    /// `w + A dp~`; a zero delta returns `w` unchanged, bit for bit.
    pub fn shift(&self, w: &LatentCode, dp: &[f64]) -> Result<LatentCode> {
        if dp.iter().all(|v| *v == 0.0) {
            w.expect_kind(LatentKind::WPlus)?;
            return Ok(w.clone());
        }
        w.shifted(&self.delta_w(dp)?)
    }

    /// `dp~ = (target - current)` for named absolute targets, others zero.
    pub fn edit_delta(&self, current: &[f64], targets: &[(usize, f64)]) -> Result<Vec<f64>> {
        let mut goal = current.to_vec();
        for &(i, v) in targets {
            if i >= POSE_DIM {
                return Err(contract(format!("attribute index {i} out of range 0..{POSE_DIM}")));
            }
            goal[i] = v;
        }
        Ok(self.rescaled_delta(current, &goal))
    }
}

/// One-hot `eps * e_i` in rescaled pose space.
pub fn single_attribute_delta(i: usize, eps: f64) -> Result<Vec<f64>> {
    if i >= POSE_DIM {
        return Err(contract(format!("attribute index {i} out of range 0..{POSE_DIM}")));
    }
    let mut d = vec![0.0; POSE_DIM];
    d[i] = eps;
    Ok(d)
}

/// Raw pose vector of a parameter set.
pub fn pose_of(p: &PoseParams) -> Vec<f64> {
    p.pose_vector().to_vec()
}

/// Largest principal angle, in degrees, between the column spaces of two direction matrices.
pub fn max_principal_angle_deg(a: &DirectionMatrix, b: &DirectionMatrix) -> f64 {
    *crate::linalg::principal_angles_deg(&a.to_dmatrix(), &b.to_dmatrix()).last().expect("nonempty")
}

impl Persist for DirectionMatrix {
    const KIND: &'static str = "directions";

    fn write(&self, ck: &mut Checkpoint) {
        ck.set_meta("k", POSE_DIM);
        ck.set_meta("num_layers", NUM_LAYERS);
        ck.set_meta("latent_dim", LATENT_DIM);
        ck.set_meta("stats.a", self.stats.a);
        ck.set_meta("stats.samples", self.stats.samples);
        ck.set_meta("stats.seed", self.stats.seed);
        ck.put("A", &[Self::ROWS, Self::COLS], &self.matrix);
        ck.put_vec("stats.low", &self.stats.low);
        ck.put_vec("stats.high", &self.stats.high);
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        let dims: (usize, usize, usize) = (ck.meta("k")?, ck.meta("num_layers")?, ck.meta("latent_dim")?);
        if dims != (POSE_DIM, NUM_LAYERS, LATENT_DIM) {
            return Err(crate::Error::Checkpoint(format!("direction shape {dims:?} does not match this build")));
        }
        let mut stats = PoseStats::new(ck.take("stats.low", POSE_DIM)?, ck.take("stats.high", POSE_DIM)?, ck.meta("stats.a")?)?;
        stats.samples = ck.meta("stats.samples")?;
        stats.seed = ck.meta("stats.seed")?;
        Self::new(ck.take("A", Self::ROWS * Self::COLS)?, stats)
    }
}

impl Persist for PoseStats {
    const KIND: &'static str = "pose_stats";

    fn write(&self, ck: &mut Checkpoint) {
        ck.set_meta("a", self.a);
        ck.set_meta("samples", self.samples);
        ck.set_meta("seed", self.seed);
        ck.put_vec("low", &self.low);
        ck.put_vec("high", &self.high);
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(ck.take("low", POSE_DIM)?, ck.take("high", POSE_DIM)?, ck.meta("a")?)?;
        s.samples = ck.meta("samples")?;
        s.seed = ck.meta("seed")?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats() -> PoseStats {
        let low = (0..POSE_DIM).map(|i| -1.0 - i as f64 * 0.1).collect();
        let high = (0..POSE_DIM).map(|i| 2.0 + i as f64 * 0.3).collect();
        PoseStats::new(low, high, 1.0).unwrap()
    }

    #[test]
    fn rescale_maps_quantiles_to_bounds() {
        let s = stats();
        let lo = s.rescale(&s.low.clone());
        let hi = s.rescale(&s.high.clone());
        let mid: Vec<f64> = (0..POSE_DIM).map(|i| 0.5 * (s.low[i] + s.high[i])).collect();
        for i in 0..POSE_DIM {
            assert!((lo[i] + 1.0).abs() < 1e-12);
            assert!((hi[i] - 1.0).abs() < 1e-12);
            assert!(s.rescale(&mid)[i].abs() < 1e-12);
        }
        let p: Vec<f64> = (0..POSE_DIM).map(|i| (i as f64 * 1.7).sin() * 5.0).collect();
        let back = s.unscale(&s.rescale(&p));
        for i in 0..POSE_DIM {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples_refused() {
        let poses = vec![[0.0; POSE_DIM]; 99];
        assert!(PoseStats::from_samples(&poses, 1.0).is_err());
    }

    #[test]
    fn delta_w_cases() {
        let a = DirectionMatrix::random(stats(), 0.3, 5);
        assert!(a.delta_w(&[0.0; POSE_DIM]).unwrap().iter().all(|v| *v == 0.0));
        let e3 = single_attribute_delta(3, 1.0).unwrap();
        assert_eq!(a.delta_w(&e3).unwrap(), a.column(3));
        let dp: Vec<f64> = (0..POSE_DIM).map(|i| 0.1 * i as f64 - 0.4).collect();
        let got = a.delta_w(&dp).unwrap();
        for r in 0..DirectionMatrix::ROWS {
            let mut s = 0.0;
            for j in 0..POSE_DIM {
                s += a.matrix[r * POSE_DIM + j] * dp[j];
            }
            assert!((got[r] - s).abs() < 1e-12);
        }
        assert!(a.delta_w(&[1.0; 3]).is_err());
    }

    #[test]
    fn single_attribute_cases() {
        assert_eq!(single_attribute_delta(0, 0.5).unwrap()[0], 0.5);
        assert!(single_attribute_delta(0, 0.0).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(single_attribute_delta(POSE_DIM - 1, 0.2).unwrap()[POSE_DIM - 1], 0.2);
        assert!(single_attribute_delta(POSE_DIM, 0.2).is_err());
    }

    #[test]
    fn oracle_reenactment_moves_only_the_pose_block() {
        let gen = ToyGenerator::new(3);
        let a = DirectionMatrix::oracle(&gen, stats());
        let codes = gen.sample_wplus(2, 8);
        let p_s: Vec<f64> = (0..POSE_DIM).map(|i| 0.2 * i as f64).collect();
        let p_t: Vec<f64> = (0..POSE_DIM).map(|i| 1.0 - 0.1 * i as f64).collect();
        let w_r = a.reenact_code(&codes[0], &p_s, &p_t).unwrap();
        let q_s = gen.semantic_params(&codes[0]).unwrap();
        let q_r = gen.semantic_params(&w_r).unwrap();
        let want = a.rescaled_delta(&p_s, &p_t);
        for k in 0..crate::Q_DIM {
            let expect = if k < POSE_DIM { want[k] } else { 0.0 };
            assert!((q_r[k] - q_s[k] - expect).abs() < 1e-6, "q[{k}]");
        }
        let back = a.reenact_code(&w_r, &p_t, &p_s).unwrap();
        for (x, y) in back.data.iter().zip(&codes[0].data) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a.reenact_code(&codes[1], &p_s, &p_s).unwrap(), codes[1]);
    }

    #[test]
    fn checkpoint_round_trip_keeps_stats() {
        let a = DirectionMatrix::random(stats(), 0.01, 1);
        assert_eq!(DirectionMatrix::from_checkpoint(&a.to_checkpoint()).unwrap(), a);
    }
}
