//! Real-image analogs, the inversion encoder and pivotal tuning.
//!
//! The corpus stands in for real photographs: renders of held-out codes from a
//! wider prior, with pixel noise and a smooth background gradient the generator
//! cannot fully express. The encoder maps an image to a layered code; pivotal
//! tuning then adjusts a private generator copy around that fixed code.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_regressor, write_regressor, Checkpoint, Persist};
use crate::error::{contract, Error, Result};
use crate::estimator::{fit_regressor, FrozenEmbedder, PoseRegressor, RegressorConfig};
use crate::image::{FaceImage, PIXELS, PLANE};
use crate::linalg::quantile;
use crate::nn::Adam;
use crate::rng;
use crate::toygen::{Calibration, LatentCode, LatentKind, RenderParams, SynthesisParams, ToyGenerator};
use crate::toygen::{Q_EXP, Q_ID, Q_NUISANCE};
use crate::{IMAGE_SIZE, Q_DIM, WPLUS_DIM};

/// Corpus codes come from `z` scaled by this factor.
pub const CORPUS_PRIOR_SCALE: f64 = 1.25;
pub const CORPUS_NOISE_STD: f64 = 0.01;
/// Std of each background gradient coefficient, in pixel units.
pub const BACKGROUND_GRADIENT_STD: f64 = 0.04;
/// Seed offset keeping corpus codes apart from training draws.
const CORPUS_STREAM: u64 = 0xc0_4b05;

/// Images standing in for real frames, with their hidden codes.
#[derive(Clone, Debug, PartialEq)]
pub struct RealAnalogCorpus {
    pub seed: u64,
    pub images: Vec<FaceImage>,
    /// Hidden ground truth; for tests and evaluation only.
    pub truth: Vec<LatentCode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndexEntry {
    pub id: usize,
    pub file: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub seed: u64,
    pub prior_scale: f64,
    pub noise_std: f64,
    pub background_gradient_std: f64,
    pub entries: Vec<CorpusIndexEntry>,
}

pub const CORPUS_INDEX: &str = "index.json";
pub const CORPUS_TRUTH: &str = "truth.ldir";

fn entry_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(id as u64)
}

/// Adds seeded pixel noise and a per-channel linear gradient over the background.
fn perturb(image: &FaceImage, mask: &[f64], seed: u64) -> FaceImage {
    let mut r = rng::derive(seed, 0x9a);
    let coef = rng::normal_vec(&mut r, 9, BACKGROUND_GRADIENT_STD);
    let noise = rng::normal_vec(&mut r, PIXELS, CORPUS_NOISE_STD);
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let xn = (x as f64 + 0.5) / IMAGE_SIZE as f64 * 2.0 - 1.0;
                let yn = (y as f64 + 0.5) / IMAGE_SIZE as f64 * 2.0 - 1.0;
                let idx = y * IMAGE_SIZE + x;
                let bg = coef[3 * c] + coef[3 * c + 1] * xn + coef[3 * c + 2] * yn;
                let i = c * PLANE + idx;
                out.pixels[i] = (out.pixels[i] + (1.0 - mask[idx]) * bg + noise[i]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Renders `code` with the corpus perturbation drawn from `seed`.
///
/// Frames sharing a seed share background and noise, like frames of one clip.
pub fn real_analog_frame(gen: &ToyGenerator, code: &LatentCode, seed: u64) -> Result<FaceImage> {
    let tape = gen.generate_with_tape(code)?;
    Ok(perturb(&tape.image, tape.mask(), seed))
}

/// `n` perturbed renders of codes drawn from a widened prior.
pub fn build_real_corpus(gen: &ToyGenerator, n: usize, seed: u64) -> Result<RealAnalogCorpus> {
    if n < 1 {
        return Err(contract("corpus needs at least one image"));
    }
    let truth = gen.sample_wplus_scaled(n, seed ^ CORPUS_STREAM, CORPUS_PRIOR_SCALE);
    let images = truth
        .iter()
        .enumerate()
        .map(|(id, code)| real_analog_frame(gen, code, entry_seed(seed, id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RealAnalogCorpus { seed, images, truth })
}

impl RealAnalogCorpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn index(&self) -> CorpusIndex {
        CorpusIndex {
            seed: self.seed,
            prior_scale: CORPUS_PRIOR_SCALE,
            noise_std: CORPUS_NOISE_STD,
            background_gradient_std: BACKGROUND_GRADIENT_STD,
            entries: (0..self.len())
                .map(|id| CorpusIndexEntry { id, file: format!("{id:05}.png"), seed: entry_seed(self.seed, id) })
                .collect(),
        }
    }

    /// PNGs, `index.json` and the truth sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let index = self.index();
        for (e, img) in index.entries.iter().zip(&self.images) {
            fs::write(dir.join(&e.file), img.to_png_bytes())?;
        }
        fs::write(dir.join(CORPUS_INDEX), serde_json::to_vec_pretty(&index).expect("index serializes"))?;
        let mut ck = Checkpoint::new("corpus_truth");
        ck.set_meta("seed", self.seed);
        let flat: Vec<f64> = self.truth.iter().flat_map(|c| c.data.iter().copied()).collect();
        ck.put("truth", &[self.truth.len(), WPLUS_DIM], &flat);
        ck.save(&dir.join(CORPUS_TRUTH))
    }

    /// Reads images through the index. Truth is loaded when the sidecar exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let index = load_index(dir)?;
        let images = index
            .entries
            .iter()
            .map(|e| FaceImage::from_png_bytes(&fs::read(dir.join(&e.file))?))
            .collect::<Result<Vec<_>>>()?;
        let truth_path = dir.join(CORPUS_TRUTH);
        let truth = if truth_path.exists() {
            let ck = Checkpoint::load(&truth_path)?;
            ck.expect_kind("corpus_truth")?;
            let flat = ck.take("truth", images.len() * WPLUS_DIM)?;
            flat.chunks(WPLUS_DIM).map(|c| LatentCode::wplus(c.to_vec())).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self { seed: index.seed, images, truth })
    }
}

pub fn load_index(dir: &Path) -> Result<CorpusIndex> {
    let bytes = fs::read(dir.join(CORPUS_INDEX))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("corpus index: {e}")))
}

/// Per-coordinate 1%..99% spread of `q` under the generator's prior.
pub fn semantic_ranges(gen: &ToyGenerator, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(contract("semantic ranges need at least two samples"));
    }
    let qs: Vec<Vec<f64>> = gen.sample_wplus(n, seed).iter().map(|c| gen.semantic_params(c)).collect::<Result<_>>()?;
    Ok((0..Q_DIM)
        .map(|k| {
            let col: Vec<f64> = qs.iter().map(|q| q[k]).collect();
            quantile(&col, 0.99) - quantile(&col, 0.01)
        })
        .collect())
}

/// `|a_k - b_k| / range_k` for every coordinate.
pub fn q_distance_fractions(a: &[f64], b: &[f64], ranges: &[f64]) -> Vec<f64> {
    a.iter().zip(b).zip(ranges).map(|((x, y), r)| (x - y).abs() / r).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub core: RegressorConfig,
    /// Corpus images scored for the quality gate.
    pub validation: usize,
    pub max_holdout_l1: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let core = RegressorConfig { z_scale: (0.8, 1.9), seed: 17, ..RegressorConfig::default() };
        Self { core, validation: 64, max_holdout_l1: 0.03 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub holdout_l1: f64,
    pub holdout_images: usize,
    /// Held-out RMSE of the render-parameter stage, as fractions of range.
    pub core_rmse_fraction: Vec<f64>,
}

/// Image to layered code.
///
/// A learned guess of the render parameters is refined against a frozen
/// renderer copy by minimizing pixel reconstruction error; the output layer
/// then maps the implied semantic coordinates to the minimum-norm layered code.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub core: PoseRegressor,
    pub calibration: Calibration,
    /// Row-major `WPLUS_DIM x Q_DIM`.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Coefficients are clamped to this fraction of their scale before `atanh`.
const CLAMP: f64 = 0.999;

impl Encoder {
    /// Output layer set to the pseudo-inverse of the generator's semantic map.
    pub fn new(core: PoseRegressor, gen: &ToyGenerator) -> Self {
        let mut head_weight = vec![0.0; WPLUS_DIM * Q_DIM];
        for k in 0..Q_DIM {
            for (i, b) in gen.semantic_row(k).iter().enumerate() {
                head_weight[i * Q_DIM + k] = *b;
            }
        }
        let neg_c: Vec<f64> = gen.semantic_offset.iter().map(|c| -c).collect();
        let head_bias = gen.semantic_vjp(&neg_c);
        Self { core, calibration: gen.calibration.clone(), head_weight, head_bias }
    }

    /// Semantic coordinates implied by the image.
    pub fn semantic_estimate(&self, image: &FaceImage) -> Vec<f64> {
        encode_clamped(&self.calibration, &self.core.estimate_render_params(image))
    }

    pub fn invert(&self, image: &FaceImage) -> LatentCode {
        let q = self.semantic_estimate(image);
        let data = (0..WPLUS_DIM)
            .map(|i| crate::linalg::dot(&self.head_weight[i * Q_DIM..(i + 1) * Q_DIM], &q) + self.head_bias[i])
            .collect();
        LatentCode { kind: LatentKind::WPlus, data }
    }
}

fn encode_clamped(cal: &Calibration, p: &RenderParams) -> Vec<f64> {
    let squash = |v: f64, s: f64| (v / s).clamp(-CLAMP, CLAMP).atanh();
    let mut q = vec![0.0; Q_DIM];
    for i in 0..3 {
        q[i] = p.pose.theta[i] / cal.theta_scale_deg;
    }
    for (j, v) in p.pose.expression.iter().enumerate() {
        q[Q_EXP + j] = squash(*v, cal.expression_scale);
    }
    for (j, v) in p.pose.identity.iter().enumerate() {
        q[Q_ID + j] = squash(*v, cal.identity_scale);
    }
    for (j, v) in p.nuisance.iter().enumerate() {
        q[Q_NUISANCE + j] = squash(*v, cal.nuisance_scale);
    }
    q
}

fn mean_l1(a: &FaceImage, b: &FaceImage) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum::<f64>() / PIXELS as f64
}

/// Mean pixel L1 between each image and the render of its inversion.
pub fn reconstruction_l1(gen: &ToyGenerator, enc: &Encoder, images: &[FaceImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyPool("reconstruction images"));
    }
    let mut total = 0.0;
    for img in images {
        total += mean_l1(&gen.generate(&enc.invert(img))?, img);
    }
    Ok(total / images.len() as f64)
}

/// Trains on generator renders, then scores reconstruction on corpus images.
/// Fails when the held-out L1 reaches `max_holdout_l1`.
pub fn train_encoder(gen: &ToyGenerator, corpus: &RealAnalogCorpus, config: &EncoderConfig) -> Result<(Encoder, EncoderReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyPool("corpus"));
    }
    let (core, core_report) = fit_regressor(gen, &config.core);
    let enc = Encoder::new(core, gen);
    let n = config.validation.clamp(1, corpus.len());
    let holdout_l1 = reconstruction_l1(gen, &enc, &corpus.images[..n])?;
    if !(holdout_l1 < config.max_holdout_l1) {
        return Err(Error::TrainingFailure {
            what: "encoder",
            metric: "held-out reconstruction L1",
            achieved: holdout_l1,
            threshold: config.max_holdout_l1,
        });
    }
    let report = EncoderReport { holdout_l1, holdout_images: n, core_rmse_fraction: core_report.rmse_fraction };
    Ok((enc, report))
}

impl Persist for Encoder {
    const KIND: &'static str = "encoder";

    fn write(&self, ck: &mut Checkpoint) {
        write_regressor(&self.core, ck, "core.");
        let c = &self.calibration;
        ck.put_vec("calibration", &[c.theta_scale_deg, c.expression_scale, c.identity_scale, c.nuisance_scale]);
        ck.put("head.weight", &[WPLUS_DIM, Q_DIM], &self.head_weight);
        ck.put_vec("head.bias", &self.head_bias);
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        let [theta_scale_deg, expression_scale, identity_scale, nuisance_scale] = ck.take_array("calibration")?;
        Ok(Self {
            core: read_regressor(ck, "core.")?,
            calibration: Calibration { theta_scale_deg, expression_scale, identity_scale, nuisance_scale },
            head_weight: ck.take("head.weight", WPLUS_DIM * Q_DIM)?,
            head_bias: ck.take("head.bias", WPLUS_DIM)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { steps: 200, learning_rate: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub generator: ToyGenerator,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Step whose parameters were kept; 0 means untouched.
    pub best_step: usize,
}

/// Pixel L1 plus perceptual distance between `generate(w)` and `image`.
pub fn reconstruction_loss(gen: &ToyGenerator, emb: &FrozenEmbedder, image: &FaceImage, w: &LatentCode) -> Result<f64> {
    let out = gen.generate(w)?;
    Ok(mean_l1(&out, image) + emb.perceptual_distance(&out, image))
}

const TUNED_LEN: usize = SynthesisParams::LEN + Q_DIM;

fn tuned_params(gen: &ToyGenerator) -> Vec<f64> {
    let mut v = gen.renderer.synthesis.to_vec();
    v.extend_from_slice(&gen.semantic_offset);
    v
}

fn set_tuned_params(gen: &mut ToyGenerator, v: &[f64]) {
    gen.renderer.synthesis = SynthesisParams::from_slice(&v[..SynthesisParams::LEN]).expect("synthesis width");
    gen.semantic_offset.copy_from_slice(&v[SynthesisParams::LEN..]);
}

/// Adam on the synthesis weights and the semantic offset of a generator copy,
/// with `w_inv` held fixed. Keeps the lowest-loss iterate.
pub fn pivotal_tune(
    gen: &ToyGenerator,
    emb: &FrozenEmbedder,
    image: &FaceImage,
    w_inv: &LatentCode,
    config: &TuneConfig,
) -> Result<TuneOutcome> {
    w_inv.expect_kind(LatentKind::WPlus)?;
    let mut tuned = gen.clone();
    let target_features = emb.features(image);
    let mut opt = Adam::new(TUNED_LEN, config.learning_rate);
    let mut params = tuned_params(&tuned);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut loss_before = f64::NAN;

    for step in 0..=config.steps {
        let q = tuned.semantic_params(w_inv)?;
        let tape = tuned.renderer.render_with_tape(&tuned.decode(&q));
        let (perceptual, g_perc) = emb.perceptual_distance_grad(&tape.image, &target_features);
        let loss = mean_l1(&tape.image, image) + perceptual;
        if !loss.is_finite() {
            return Err(Error::NonFinite { iteration: step });
        }
        if step == 0 {
            loss_before = loss;
        }
        if loss < best.0 {
            best = (loss, params.clone(), step);
        }
        if step == config.steps {
            break;
        }
        let inv_n = 1.0 / PIXELS as f64;
        let g_img: Vec<f64> = tape
            .image
            .pixels
            .iter()
            .zip(&image.pixels)
            .zip(&g_perc)
            .map(|((a, b), gp)| (a - b).signum() * inv_n + gp)
            .collect();
        let rg = tuned.renderer.render_vjp(&tape, &g_img);
        let mut grad = rg.synthesis;
        grad.extend(tuned.decode_vjp(&q, &rg.params));
        for (p, u) in params.iter_mut().zip(opt.step(&grad)) {
            *p += u;
        }
        set_tuned_params(&mut tuned, &params);
    }

    let (loss_after, kept, best_step) = best;
    set_tuned_params(&mut tuned, &kept);
    Ok(TuneOutcome { generator: tuned, loss_before, loss_after, best_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::FrozenEmbedder;

    fn small_core() -> RegressorConfig {
        RegressorConfig {
            n_train: 600,
            n_holdout: 20,
            pca_samples: 400,
            components: 48,
            hidden: 64,
            epochs: 8,
            z_scale: (0.8, 1.9),
            ..RegressorConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_noisy() {
        let gen = ToyGenerator::new(7);
        let a = build_real_corpus(&gen, 3, 4).unwrap();
        let b = build_real_corpus(&gen, 3, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images[0], build_real_corpus(&gen, 3, 5).unwrap().images[0]);
        assert!(build_real_corpus(&gen, 0, 4).is_err());
        assert_eq!(build_real_corpus(&gen, 1, 4).unwrap().len(), 1);
    }

    #[test]
    fn corpus_round_trips_through_directory() {
        let gen = ToyGenerator::new(7);
        let corpus = build_real_corpus(&gen, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let back = RealAnalogCorpus::load(dir.path()).unwrap();
        assert_eq!(back.truth, corpus.truth);
        for (a, b) in back.images.iter().zip(&corpus.images) {
            assert!(mean_l1(a, b) < 1.0 / 255.0);
        }
        let index = load_index(dir.path()).unwrap();
        assert_eq!(index.entries.len(), 2);
        assert_eq!(index.entries[1].file, "00001.png");
    }

    #[test]
    fn head_maps_semantics_back_to_min_norm_code() {
        let gen = ToyGenerator::new(7);
        let (core, _) = fit_regressor(&gen, &small_core());
        let enc = Encoder::new(core, &gen);
        let code = &gen.sample_wplus(1, 3)[0];
        let q = gen.semantic_params(code).unwrap();
        let w: Vec<f64> = (0..WPLUS_DIM)
            .map(|i| crate::linalg::dot(&enc.head_weight[i * Q_DIM..(i + 1) * Q_DIM], &q) + enc.head_bias[i])
            .collect();
        let expect = gen.wplus_for_q(&q);
        for (a, b) in w.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let inv = enc.invert(&gen.generate(code).unwrap());
        assert_eq!(inv.kind, LatentKind::WPlus);
        assert_eq!(inv, enc.invert(&gen.generate(code).unwrap()));
        let back = Encoder::from_checkpoint(&enc.to_checkpoint()).unwrap();
        assert_eq!(back, enc);
    }

    #[test]
    fn tuning_zero_steps_returns_identical_copy() {
        let gen = ToyGenerator::new(7);
        let emb = FrozenEmbedder::new(3, &gen);
        let code = gen.sample_wplus(1, 2).remove(0);
        let img = gen.generate(&code).unwrap();
        let out = pivotal_tune(&gen, &emb, &img, &code, &TuneConfig { steps: 0, ..TuneConfig::default() }).unwrap();
        assert_eq!(out.generator, gen);
        assert_eq!(out.loss_before, out.loss_after);
    }

    #[test]
    fn tuning_lowers_loss_and_leaves_original_alone() {
        let gen = ToyGenerator::new(7);
        let snapshot = gen.clone();
        let emb = FrozenEmbedder::new(3, &gen);
        let corpus = build_real_corpus(&gen, 1, 6).unwrap();
        let code = corpus.truth[0].clone();
        let out = pivotal_tune(&gen, &emb, &corpus.images[0], &code, &TuneConfig { steps: 30, ..TuneConfig::default() }).unwrap();
        assert_eq!(gen, snapshot);
        assert!(out.loss_after < out.loss_before);
        let direct = reconstruction_loss(&out.generator, &emb, &corpus.images[0], &code).unwrap();
        assert!((direct - out.loss_after).abs() < 1e-12);
    }
}
