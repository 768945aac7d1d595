//! Metrics and the direction analyses.
//!
//! NME here is computed from landmarks of the internal estimator chain, so its
//! values compare only within this crate. FID, FVD and LPIPS are not computed.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::directions::{pose_of, single_attribute_delta, DirectionMatrix};
use crate::error::{contract, Error, Result};
use crate::estimator::{FrozenEmbedder, PoseRegressor};
use crate::image::FaceImage;
use crate::linalg::{dot, norm, pearson};
use crate::rng;
use crate::shape3d::{project_landmarks, PoseParams, ShapeModel};
use crate::toygen::{LatentCode, ToyGenerator};
use crate::{attribute_names, EXP_DIM, POSE_DIM};

/// Normalized mean error: mean landmark distance over `sqrt(w h)`, times 1000.
pub fn nme(pred: &[[f64; 2]], gt: &[[f64; 2]], bbox: (f64, f64)) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(contract("nme needs two nonempty landmark sets of equal length"));
    }
    let area = bbox.0 * bbox.1;
    if !(area > 0.0) {
        return Err(contract(format!("bounding box {}x{} has no area", bbox.0, bbox.1)));
    }
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()).sum();
    Ok(total / pred.len() as f64 / area.sqrt() * 1e3)
}

/// Width and height of the landmarks' axis-aligned bounding box.
pub fn bounding_box(points: &[[f64; 2]]) -> (f64, f64) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    (x1 - x0, y1 - y0)
}

/// Mean absolute angle difference, degrees.
pub fn pose_error(a: &PoseParams, b: &PoseParams) -> f64 {
    a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0
}

/// Mean absolute expression-coefficient difference.
pub fn expression_error(a: &PoseParams, b: &PoseParams) -> f64 {
    a.expression.iter().zip(&b.expression).map(|(x, y)| (x - y).abs()).sum::<f64>() / EXP_DIM as f64
}

/// Cosine similarity of identity embeddings.
pub fn csim(emb: &FrozenEmbedder, a: &FaceImage, b: &FaceImage) -> f64 {
    let (ea, eb) = (emb.identity_embed(a), emb.identity_embed(b));
    let d = norm(&ea) * norm(&eb);
    if d == 0.0 {
        return 0.0;
    }
    (dot(&ea, &eb) / d).clamp(-1.0, 1.0)
}

fn landmarks_of(model: &ShapeModel, p: &PoseParams) -> Vec<[f64; 2]> {
    project_landmarks(&model.posed_shape(p))
}

/// Mean over attributes of `|p~_r - p~_t|` after rescaling.
pub fn pose_transfer_error(a: &DirectionMatrix, p_r: &[f64], p_t: &[f64]) -> f64 {
    let (r, t) = (a.stats.rescale(p_r), a.stats.rescale(p_t));
    r.iter().zip(&t).map(|(x, y)| (x - y).abs()).sum::<f64>() / POSE_DIM as f64
}

/// Reenacts `w_s` (whose image estimated as `p_s`) toward `p_t`, renders with
/// `gen` and returns the transfer error of the re-estimated pose.
pub fn reenactment_transfer_error(
    gen: &ToyGenerator,
    reg: &PoseRegressor,
    a: &DirectionMatrix,
    w_s: &LatentCode,
    p_s: &[f64],
    p_t: &[f64],
) -> Result<f64> {
    let w_r = a.reenact_code(w_s, p_s, p_t)?;
    let p_r = pose_of(&reg.estimate(&gen.generate(&w_r)?));
    Ok(pose_transfer_error(a, &p_r, p_t))
}

/// Attributes scored by the linearity analysis: yaw, pitch and the two mouth coordinates.
pub const LINEARITY_ATTRIBUTES: [usize; 4] = [0, 1, 3, 4];
pub const MIN_LINEARITY_EDITS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityAttribute {
    pub attribute: String,
    pub index: usize,
    pub correlation: f64,
    /// `(||dw||, |dp^|)` per edit.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub attributes: Vec<LinearityAttribute>,
}

impl LinearityReport {
    pub fn correlation(&self, index: usize) -> Option<f64> {
        self.attributes.iter().find(|a| a.index == index).map(|a| a.correlation)
    }

    /// `attribute,index,dw_norm,dp_abs` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("attribute,index,dw_norm,dp_abs\n");
        for a in &self.attributes {
            for (x, y) in &a.points {
                let _ = writeln!(s, "{},{},{x},{y}", a.attribute, a.index);
            }
        }
        s
    }
}

/// For each scored attribute, shifts `n_edits` prior codes along that
/// attribute by a magnitude uniform in `[-a, a]` and correlates the latent
/// step length with the estimated change of the attribute.
pub fn linearity_analysis(
    gen: &ToyGenerator,
    reg: &PoseRegressor,
    a: &DirectionMatrix,
    n_edits: usize,
    seed: u64,
) -> Result<LinearityReport> {
    if n_edits < MIN_LINEARITY_EDITS {
        return Err(contract(format!("{n_edits} edits are too few for a correlation (need {MIN_LINEARITY_EDITS})")));
    }
    let names = attribute_names();
    let sources = gen.sample_wplus(n_edits, seed);
    let source_poses: Vec<Vec<f64>> = sources
        .iter()
        .map(|c| Ok(pose_of(&reg.estimate(&gen.generate(c)?))))
        .collect::<Result<_>>()?;
    let mut r = rng::derive(seed, 0x11);
    let mut attributes = Vec::new();
    for &i in &LINEARITY_ATTRIBUTES {
        let mut points = Vec::with_capacity(n_edits);
        for (w_s, p_s) in sources.iter().zip(&source_poses) {
            let eps = r.random_range(-a.stats.a..=a.stats.a);
            let dw = a.delta_w(&single_attribute_delta(i, eps)?)?;
            let w_r = w_s.shifted(&dw)?;
            let p_r = pose_of(&reg.estimate(&gen.generate(&w_r)?));
            points.push((norm(&dw), (p_r[i] - p_s[i]).abs()));
        }
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        attributes.push(LinearityAttribute { attribute: names[i].clone(), index: i, correlation: pearson(&xs, &ys), points });
    }
    Ok(LinearityReport { attributes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementRecord {
    /// Requested change of the edited attribute, raw units.
    pub requested: f64,
    pub achieved: f64,
    /// `|p_r,j - p_s,j| / range_j` for every attribute; the edited one included.
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub attribute: String,
    pub index: usize,
    /// Median over pairs of each attribute's relative change; 0 at `index`.
    pub median_off_target: Vec<f64>,
    /// Median of `achieved / requested` over pairs with a nonzero request.
    pub median_achieved_fraction: Option<f64>,
    pub records: Vec<DisentanglementRecord>,
}

impl DisentanglementReport {
    pub fn worst_off_target(&self) -> f64 {
        self.median_off_target.iter().enumerate().filter(|(j, _)| *j != self.index).fold(0.0, |m, (_, v)| m.max(*v))
    }

    /// `attribute,median_off_target` rows.
    pub fn to_csv(&self) -> String {
        let names = attribute_names();
        let mut s = String::from("attribute,median_relative_change\n");
        for (j, v) in self.median_off_target.iter().enumerate() {
            if j != self.index {
                let _ = writeln!(s, "{},{v}", names[j]);
            }
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    crate::linalg::quantile(values, 0.5)
}

/// Transfers only attribute `index` from random targets to random sources and
/// measures how every other estimated attribute moves.
pub fn disentanglement_report(
    gen: &ToyGenerator,
    reg: &PoseRegressor,
    a: &DirectionMatrix,
    index: usize,
    n: usize,
    seed: u64,
) -> Result<DisentanglementReport> {
    if index >= POSE_DIM {
        return Err(contract(format!("attribute index {index} out of range 0..{POSE_DIM}")));
    }
    if n == 0 {
        return Err(contract("disentanglement needs at least one pair"));
    }
    let sources = gen.sample_wplus(n, seed);
    let targets = gen.sample_wplus(n, seed ^ 0x7a26_e7);
    let mut records = Vec::with_capacity(n);
    for (w_s, w_t) in sources.iter().zip(&targets) {
        let p_s = pose_of(&reg.estimate(&gen.generate(w_s)?));
        let p_t = pose_of(&reg.estimate(&gen.generate(w_t)?));
        records.push(single_transfer(gen, reg, a, index, w_s, &p_s, p_t[index])?);
    }
    Ok(summarize_disentanglement(index, records))
}

/// One transfer of attribute `index` to the raw value `target`.
pub fn single_transfer(
    gen: &ToyGenerator,
    reg: &PoseRegressor,
    a: &DirectionMatrix,
    index: usize,
    w_s: &LatentCode,
    p_s: &[f64],
    target: f64,
) -> Result<DisentanglementRecord> {
    let dp = a.edit_delta(p_s, &[(index, target)])?;
    let w_r = a.shift(w_s, &dp)?;
    let p_r = pose_of(&reg.estimate(&gen.generate(&w_r)?));
    Ok(DisentanglementRecord {
        requested: target - p_s[index],
        achieved: p_r[index] - p_s[index],
        deltas: (0..POSE_DIM).map(|j| (p_r[j] - p_s[j]).abs() / a.stats.range(j)).collect(),
    })
}

pub fn summarize_disentanglement(index: usize, records: Vec<DisentanglementRecord>) -> DisentanglementReport {
    let median_off_target = (0..POSE_DIM)
        .map(|j| if j == index { 0.0 } else { median(&records.iter().map(|r| r.deltas[j]).collect::<Vec<_>>()) })
        .collect();
    let fractions: Vec<f64> = records.iter().filter(|r| r.requested != 0.0).map(|r| r.achieved / r.requested).collect();
    let median_achieved_fraction = (!fractions.is_empty()).then(|| median(&fractions));
    DisentanglementReport {
        attribute: attribute_names()[index].clone(),
        index,
        median_off_target,
        median_achieved_fraction,
        records,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Source and target share an identity; CSIM against the target.
    #[serde(rename = "self")]
    SelfReenactment,
    /// Different identities; CSIM against the source.
    Cross,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfReenactment),
            "cross" => Ok(Self::Cross),
            other => Err(contract(format!("unknown eval mode {other:?}; expected self or cross"))),
        }
    }
}

/// A source frame with the code it inverts to, and a driving target frame.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub source_image: FaceImage,
    pub source_code: LatentCode,
    pub target_image: FaceImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair: usize,
    pub csim: f64,
    pub pose_l1_deg: f64,
    pub exp_l1: f64,
    pub nme: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub records: Vec<EvalRecord>,
    pub mean_csim: f64,
    pub mean_pose_l1_deg: f64,
    pub mean_exp_l1: f64,
    pub mean_nme: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linearity: Option<LinearityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disentanglement: Option<DisentanglementReport>,
    pub notes: Vec<String>,
}

pub const REPORT_NOTES: [&str; 2] = [
    "NME uses landmarks from the internal estimator chain; values are comparable only within this tool.",
    "FID, FVD and LPIPS are not computed.",
];

impl EvalReport {
    pub fn from_records(mode: EvalMode, records: Vec<EvalRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyPool("eval records"));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mode,
            mean_csim: mean(|r| r.csim),
            mean_pose_l1_deg: mean(|r| r.pose_l1_deg),
            mean_exp_l1: mean(|r| r.exp_l1),
            mean_nme: mean(|r| r.nme),
            records,
            linearity: None,
            disentanglement: None,
            notes: REPORT_NOTES.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// One row per pair.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,csim,pose_l1_deg,exp_l1,nme\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.pair, r.csim, r.pose_l1_deg, r.exp_l1, r.nme);
        }
        s
    }

    /// Record table, aggregates and notes as plain text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            EvalMode::SelfReenactment => "self",
            EvalMode::Cross => "cross",
        };
        let _ = writeln!(s, "mode: {mode}  pairs: {}", self.records.len());
        let _ = writeln!(s, "{:>6} {:>8} {:>10} {:>8} {:>9}", "pair", "csim", "pose_deg", "exp_l1", "nme");
        for r in &self.records {
            let _ = writeln!(s, "{:>6} {:>8.4} {:>10.4} {:>8.4} {:>9.3}", r.pair, r.csim, r.pose_l1_deg, r.exp_l1, r.nme);
        }
        let _ = writeln!(
            s,
            "{:>6} {:>8.4} {:>10.4} {:>8.4} {:>9.3}",
            "mean", self.mean_csim, self.mean_pose_l1_deg, self.mean_exp_l1, self.mean_nme
        );
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Reenacts every pair and scores the result.
///
/// Pose, expression and NME are measured against the target. CSIM is taken
/// against the target in self mode and against the source in cross mode. The
/// reference landmarks combine the source's identity with the target's pose
/// and expression.
pub fn run_eval(
    gen: &ToyGenerator,
    reg: &PoseRegressor,
    emb: &FrozenEmbedder,
    a: &DirectionMatrix,
    mode: EvalMode,
    pairs: &[EvalPair],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyPool("eval pairs"));
    }
    let model = &reg.renderer.shape_model;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let est_s = reg.estimate(&pair.source_image);
        let est_t = reg.estimate(&pair.target_image);
        let w_r = a.reenact_code(&pair.source_code, &pose_of(&est_s), &pose_of(&est_t))?;
        let img_r = gen.generate(&w_r)?;
        let est_r = reg.estimate(&img_r);
        let reference = match mode {
            EvalMode::SelfReenactment => &pair.target_image,
            EvalMode::Cross => &pair.source_image,
        };
        let gt = PoseParams { identity: est_s.identity.clone(), ..est_t.clone() };
        let gt_lm = landmarks_of(model, &gt);
        records.push(EvalRecord {
            pair: i,
            csim: csim(emb, reference, &img_r),
            pose_l1_deg: pose_error(&est_r, &est_t),
            exp_l1: expression_error(&est_r, &est_t),
            nme: nme(&landmarks_of(model, &est_r), &gt_lm, bounding_box(&gt_lm))?,
        });
    }
    EvalReport::from_records(mode, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit_regressor, RegressorConfig};

    fn pose(theta: [f64; 3]) -> PoseParams {
        PoseParams { theta, ..PoseParams::default() }
    }

    #[test]
    fn nme_forced_example() {
        let gt: Vec<[f64; 2]> = (0..68).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let pred: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((nme(&pred, &gt, (100.0, 100.0)).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(nme(&gt, &gt, (100.0, 100.0)).unwrap(), 0.0);
        assert!(nme(&pred, &gt, (0.0, 100.0)).is_err());
    }

    #[test]
    fn pose_and_expression_errors() {
        assert_eq!(pose_error(&pose([3.0, 0.0, 0.0]), &pose([0.0; 3])), 1.0);
        assert_eq!(pose_error(&pose([1.0, 2.0, 3.0]), &pose([1.0, 2.0, 3.0])), 0.0);
        let mut a = PoseParams::default();
        a.expression[0] = 1.2;
        assert!((expression_error(&a, &PoseParams::default()) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn csim_is_one_on_same_image_and_symmetric() {
        let gen = ToyGenerator::new(7);
        let emb = FrozenEmbedder::new(3, &gen);
        let codes = gen.sample_wplus(2, 4);
        let (x, y) = (gen.generate(&codes[0]).unwrap(), gen.generate(&codes[1]).unwrap());
        assert!((csim(&emb, &x, &x) - 1.0).abs() < 1e-12);
        assert_eq!(csim(&emb, &x, &y), csim(&emb, &y, &x));
    }

    #[test]
    fn mode_parses() {
        assert_eq!("self".parse::<EvalMode>().unwrap(), EvalMode::SelfReenactment);
        assert_eq!("cross".parse::<EvalMode>().unwrap(), EvalMode::Cross);
        assert!("both".parse::<EvalMode>().is_err());
        assert_eq!(serde_json::to_string(&EvalMode::SelfReenactment).unwrap(), "\"self\"");
    }

    #[test]
    fn analyses_refuse_bad_arguments() {
        let gen = ToyGenerator::new(7);
        let (reg, _) = fit_regressor(&gen, &RegressorConfig { n_train: 200, n_holdout: 10, pca_samples: 200, components: 16, hidden: 16, epochs: 1, ..RegressorConfig::default() });
        let stats = crate::directions::PoseStats::new(vec![-1.0; POSE_DIM], vec![1.0; POSE_DIM], 1.0).unwrap();
        let a = DirectionMatrix::oracle(&gen, stats);
        assert!(linearity_analysis(&gen, &reg, &a, 10, 1).is_err());
        assert!(disentanglement_report(&gen, &reg, &a, POSE_DIM, 5, 1).is_err());
        let emb = FrozenEmbedder::new(3, &gen);
        assert!(run_eval(&gen, &reg, &emb, &a, EvalMode::Cross, &[]).is_err());
    }

    #[test]
    fn zero_magnitude_transfer_changes_nothing() {
        let gen = ToyGenerator::new(7);
        let (reg, _) = fit_regressor(&gen, &RegressorConfig { n_train: 200, n_holdout: 10, pca_samples: 200, components: 16, hidden: 16, epochs: 1, ..RegressorConfig::default() });
        let stats = crate::directions::PoseStats::new(vec![-40.0; POSE_DIM], vec![40.0; POSE_DIM], 1.0).unwrap();
        let a = DirectionMatrix::oracle(&gen, stats);
        let w = gen.sample_wplus(1, 8).remove(0);
        let p = pose_of(&reg.estimate(&gen.generate(&w).unwrap()));
        let rec = single_transfer(&gen, &reg, &a, 0, &w, &p, p[0]).unwrap();
        assert!(rec.deltas.iter().all(|d| *d == 0.0));
        assert_eq!(rec.requested, 0.0);
    }

    #[test]
    fn report_means_match_records() {
        let records: Vec<EvalRecord> = (0..5)
            .map(|i| EvalRecord { pair: i, csim: 0.1 * i as f64, pose_l1_deg: i as f64, exp_l1: 0.5, nme: 10.0 + i as f64 })
            .collect();
        let r = EvalReport::from_records(EvalMode::Cross, records).unwrap();
        assert!((r.mean_csim - 0.2).abs() < 1e-12);
        assert!((r.mean_nme - 12.0).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 6);
        assert!(r.to_text().contains("FID"));
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
