//! Loss stack and the three training schemes for the direction matrix.
//!
//! Only `A` is trainable. For one sample the reenacted code is
//! `w_r = w_s + A dp~`, so with `g_q` the loss gradient on the semantic
//! coordinates of `w_r`, the gradient on `A` is `(B^T g_q) dp~^T`.

use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::directions::{single_attribute_delta, DirectionMatrix};
use crate::error::{contract, Error, Result};
use crate::estimator::{FeatureTape, FrozenEmbedder, PoseRegressor};
use crate::image::FaceImage;
use crate::inversion::Encoder;
use crate::linalg::dot;
use crate::nn::ColumnAdam;
use crate::rng;
use crate::shape3d::{
    apply_pose_vjp, reenactment_loss_grad, reenactment_loss_parts, LandmarkPairTable, PoseParams, Shape3D, ShapeModel,
};
use crate::toygen::{LatentCode, ToyGenerator};
use crate::POSE_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reenactment: f64,
    pub identity: f64,
    pub perceptual: f64,
    /// Used by the paired loss only.
    pub pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { reenactment: 1.0, identity: 10.0, perceptual: 10.0, pixel: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Synthetic,
    Mixed,
    Paired,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "mixed" => Ok(Self::Mixed),
            "paired" => Ok(Self::Paired),
            _ => Err(contract(format!("unknown scheme `{s}` (synthetic, mixed, paired)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub single_attribute_fraction: f64,
    pub mixed_real_fraction: f64,
    /// Standard deviation of the i.i.d. normal initial entries of `A`.
    pub init_std: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Synthetic,
            iterations: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            single_attribute_fraction: 0.5,
            mixed_real_fraction: 0.5,
            init_std: 0.001,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("single_attribute_fraction", self.single_attribute_fraction), ("mixed_real_fraction", self.mixed_real_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(contract(format!("{name} = {f} is outside [0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(contract("learning_rate must be positive"));
        }
        let w = &self.weights;
        if [w.reenactment, w.identity, w.perceptual, w.pixel].iter().any(|v| *v < 0.0) {
            return Err(contract("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Frozen networks shared by every loss evaluation.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub gen: &'a ToyGenerator,
    pub reg: &'a PoseRegressor,
    pub emb: &'a FrozenEmbedder,
}

/// `1 - cos` of the identity embeddings.
pub fn identity_loss(emb: &FrozenEmbedder, a: &FaceImage, b: &FaceImage) -> f64 {
    1.0 - dot(&emb.identity_embed(a), &emb.identity_embed(b))
}

pub fn perceptual_loss(emb: &FrozenEmbedder, a: &FaceImage, b: &FaceImage) -> f64 {
    emb.perceptual_distance(a, b)
}

/// Mean absolute pixel difference.
pub fn pixel_loss(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    if a.pixels.len() != b.pixels.len() {
        return Err(contract("pixel loss needs images of equal size"));
    }
    Ok(a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.pixels.len() as f64)
}

/// Weighted loss terms. `total` is the weighted sum of the four main terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reenactment: f64,
    pub shape: f64,
    pub eye: f64,
    pub mouth: f64,
    pub identity: f64,
    pub perceptual: f64,
    pub pixel: f64,
}

impl LossBreakdown {
    fn combine(weights: &LossWeights, parts: [f64; 3], identity: f64, perceptual: f64, pixel: f64) -> Self {
        let reenactment = parts.iter().sum::<f64>();
        Self {
            total: weights.reenactment * reenactment
                + weights.identity * identity
                + weights.perceptual * perceptual
                + weights.pixel * pixel,
            reenactment,
            shape: parts[0],
            eye: parts[1],
            mouth: parts[2],
            identity,
            perceptual,
            pixel,
        }
    }

    fn add_scaled(&mut self, o: &Self, s: f64) {
        self.total += s * o.total;
        self.reenactment += s * o.reenactment;
        self.shape += s * o.shape;
        self.eye += s * o.eye;
        self.mouth += s * o.mouth;
        self.identity += s * o.identity;
        self.perceptual += s * o.perceptual;
        self.pixel += s * o.pixel;
    }
}

/// Shape the reenacted face should have: source identity, target expression,
/// posed with the target angles.
pub fn ground_truth_shape(model: &ShapeModel, source: &PoseParams, target: &PoseParams) -> Shape3D {
    model.posed_shape(&PoseParams { theta: target.theta, expression: target.expression, identity: source.identity })
}

/// `lambda_r L_r(S_r, S_gt) + lambda_id L_id(I_s, I_r) + lambda_per L_per(I_s, I_r)`.
pub fn total_loss_unpaired(
    emb: &FrozenEmbedder,
    weights: &LossWeights,
    i_s: &FaceImage,
    i_r: &FaceImage,
    s_r: &Shape3D,
    s_gt: &Shape3D,
    pairs: &LandmarkPairTable,
) -> LossBreakdown {
    let parts = reenactment_loss_parts(s_r, s_gt, pairs);
    LossBreakdown::combine(weights, parts, identity_loss(emb, i_s, i_r), perceptual_loss(emb, i_s, i_r), 0.0)
}

/// The unpaired stack measured against the target frame, plus `lambda_pix L_pix(I_r, I_t)`.
pub fn total_loss_paired(
    emb: &FrozenEmbedder,
    weights: &LossWeights,
    i_r: &FaceImage,
    i_t: &FaceImage,
    s_r: &Shape3D,
    s_gt: &Shape3D,
    pairs: &LandmarkPairTable,
) -> Result<LossBreakdown> {
    let parts = reenactment_loss_parts(s_r, s_gt, pairs);
    Ok(LossBreakdown::combine(
        weights,
        parts,
        identity_loss(emb, i_r, i_t),
        perceptual_loss(emb, i_r, i_t),
        pixel_loss(i_r, i_t)?,
    ))
}

/// A code with its render and the regressor's estimate of that render.
#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub code: LatentCode,
    pub image: FaceImage,
    pub params: PoseParams,
}

impl PoolEntry {
    pub fn from_code(f: Frozen, code: LatentCode) -> Self {
        let image = f.gen.generate(&code).expect("layered code");
        let params = f.reg.estimate(&image);
        Self { code, image, params }
    }
}

/// Codes the samplers draw from, estimated once up front.
#[derive(Clone, Debug, Default)]
pub struct TrainingPools {
    /// Codes from the generator prior.
    pub synthetic: Vec<PoolEntry>,
    /// Inverted codes of real-analog images.
    pub real: Vec<PoolEntry>,
    /// Same-identity frame pairs with different pose.
    pub paired: Vec<(PoolEntry, PoolEntry)>,
}

/// `n` prior codes with their estimates.
pub fn synthetic_pool(f: Frozen, n: usize, seed: u64) -> Vec<PoolEntry> {
    f.gen.sample_wplus(n, seed).into_iter().map(|c| PoolEntry::from_code(f, c)).collect()
}

/// Inverted codes of real-analog images. Each entry keeps the real image and
/// the regressor's estimate of it, so the loss sees the inversion gap.
pub fn real_pool(f: Frozen, enc: &Encoder, images: &[FaceImage]) -> Vec<PoolEntry> {
    images
        .iter()
        .map(|img| PoolEntry { code: enc.invert(img), image: img.clone(), params: f.reg.estimate(img) })
        .collect()
}

/// Pairs of frames of one face: the second frame takes the pose and
/// expression coordinates of an unrelated prior code and keeps the rest.
pub fn paired_codes(gen: &ToyGenerator, n: usize, seed: u64) -> Vec<(LatentCode, LatentCode)> {
    let sources = gen.sample_wplus(n, seed);
    let donors = gen.sample_wplus(n, seed ^ 0x9a12ed);
    sources
        .into_iter()
        .zip(donors)
        .map(|(s, d)| {
            let qs = gen.semantic_params(&s).expect("layered");
            let qd = gen.semantic_params(&d).expect("layered");
            let mut dq = vec![0.0; crate::Q_DIM];
            dq[..POSE_DIM].copy_from_slice(&(0..POSE_DIM).map(|k| qd[k] - qs[k]).collect::<Vec<_>>());
            let t = s.shifted(&gen.semantic_vjp(&dq)).expect("layered");
            (s, t)
        })
        .collect()
}

pub fn paired_pool(f: Frozen, n: usize, seed: u64) -> Vec<(PoolEntry, PoolEntry)> {
    paired_codes(f.gen, n, seed)
        .into_iter()
        .map(|(s, t)| (PoolEntry::from_code(f, s), PoolEntry::from_code(f, t)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Synthetic,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetSpec {
    /// Take the pose of another pool entry.
    Entry(PoolKind, usize),
    /// Source pose with one rescaled attribute moved by `eps`.
    SingleAttribute { index: usize, eps: f64 },
    /// The second frame of a paired entry.
    PairedFrame(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    /// For `PairedFrame` targets the source is the first frame of that pair.
    pub source: (PoolKind, usize),
    pub target: TargetSpec,
}

fn pick_kind(r: &mut rng::Rng, pools: &TrainingPools, real_fraction: f64) -> Result<(PoolKind, usize)> {
    let real = real_fraction > 0.0 && r.random::<f64>() < real_fraction;
    let (kind, n) = if real { (PoolKind::Real, pools.real.len()) } else { (PoolKind::Synthetic, pools.synthetic.len()) };
    if n == 0 {
        return Err(Error::EmptyPool(if real { "real-analog codes" } else { "synthetic codes" }));
    }
    Ok((kind, r.random_range(0..n)))
}

/// Draws one training sample for `config.scheme`.
pub fn sample_training_pair(config: &TrainConfig, r: &mut rng::Rng, pools: &TrainingPools, a: f64) -> Result<TrainingSample> {
    match config.scheme {
        Scheme::Paired => {
            if pools.paired.is_empty() {
                return Err(Error::EmptyPool("paired frames"));
            }
            let i = r.random_range(0..pools.paired.len());
            Ok(TrainingSample { source: (PoolKind::Synthetic, i), target: TargetSpec::PairedFrame(i) })
        }
        Scheme::Synthetic | Scheme::Mixed => {
            let real = if config.scheme == Scheme::Mixed { config.mixed_real_fraction } else { 0.0 };
            let source = pick_kind(r, pools, real)?;
            let single = config.single_attribute_fraction > 0.0 && r.random::<f64>() < config.single_attribute_fraction;
            let target = if single {
                TargetSpec::SingleAttribute { index: r.random_range(0..POSE_DIM), eps: r.random_range(-a..=a) }
            } else {
                let (kind, i) = pick_kind(r, pools, real)?;
                TargetSpec::Entry(kind, i)
            };
            Ok(TrainingSample { source, target })
        }
    }
}

/// A sample with everything the loss needs.
#[derive(Clone, Debug)]
pub struct ResolvedSample {
    pub w_s: LatentCode,
    pub i_s: FaceImage,
    pub p_s: PoseParams,
    /// Target pose; its identity block is unused.
    pub p_t: PoseParams,
    /// Rescaled pose delta applied through `A`.
    pub dp: Vec<f64>,
    /// Target frame, present for paired samples.
    pub i_t: Option<FaceImage>,
}

impl ResolvedSample {
    pub fn unpaired(a: &DirectionMatrix, source: &PoolEntry, target: &PoseParams) -> Self {
        let (ps, pt) = (source.params.pose_vector(), target.pose_vector());
        Self {
            w_s: source.code.clone(),
            i_s: source.image.clone(),
            p_s: source.params.clone(),
            p_t: target.clone(),
            dp: a.rescaled_delta(&ps, &pt),
            i_t: None,
        }
    }

    pub fn paired(a: &DirectionMatrix, source: &PoolEntry, target: &PoolEntry) -> Self {
        let mut s = Self::unpaired(a, source, &target.params);
        s.i_t = Some(target.image.clone());
        s
    }
}

pub fn resolve(a: &DirectionMatrix, pools: &TrainingPools, s: &TrainingSample) -> Result<ResolvedSample> {
    let entry = |(kind, i): (PoolKind, usize)| -> &PoolEntry {
        match kind {
            PoolKind::Synthetic => &pools.synthetic[i],
            PoolKind::Real => &pools.real[i],
        }
    };
    Ok(match s.target {
        TargetSpec::PairedFrame(i) => {
            let (src, tgt) = &pools.paired[i];
            ResolvedSample::paired(a, src, tgt)
        }
        TargetSpec::Entry(kind, i) => ResolvedSample::unpaired(a, entry(s.source), &entry((kind, i)).params),
        TargetSpec::SingleAttribute { index, eps } => {
            let src = entry(s.source);
            let dp = single_attribute_delta(index, eps)?;
            let ps = a.stats.rescale(&src.params.pose_vector());
            let moved: Vec<f64> = ps.iter().zip(&dp).map(|(x, d)| x + d).collect();
            let p_t = src.params.with_pose_vector(&a.stats.unscale(&moved));
            ResolvedSample { w_s: src.code.clone(), i_s: src.image.clone(), p_s: src.params.clone(), p_t, dp, i_t: None }
        }
    })
}

/// Forward pass of one sample, and optionally the gradient of its loss on `A`.
pub fn sample_loss(f: Frozen, a: &DirectionMatrix, s: &ResolvedSample, weights: &LossWeights, with_grad: bool) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let pairs = LandmarkPairTable::standard();
    let w_r = a.shift(&s.w_s, &s.dp)?;
    let q_r = f.gen.semantic_params(&w_r)?;
    let tape = f.gen.renderer.render_with_tape(&f.gen.decode(&q_r));
    let i_r = &tape.image;
    let reg_tape = f.reg.estimate_with_tape(i_r);
    let p_r = &reg_tape.params;
    let shape_model = &f.gen.renderer.shape_model;
    let s_r = shape_model.posed_shape(p_r);
    let s_gt = ground_truth_shape(shape_model, &s.p_s, &s.p_t);
    let parts = reenactment_loss_parts(&s_r, &s_gt, &pairs);

    // Identity and perceptual terms compare against the source, or the target frame when paired.
    let reference = s.i_t.as_ref().unwrap_or(&s.i_s);
    let e_ref = f.emb.identity_embed(reference);
    let e_tape = f.emb.embed_with_tape(i_r);
    let id = 1.0 - dot(&e_ref, &e_tape.embedding);
    let f_ref: FeatureTape = f.emb.features(reference);
    let (per, per_grad) = if with_grad {
        let (d, g) = f.emb.perceptual_distance_grad(i_r, &f_ref);
        (d, Some(g))
    } else {
        (crate::estimator::perceptual_from_features(&f.emb.features(i_r), &f_ref), None)
    };
    let pix = match &s.i_t {
        Some(t) => pixel_loss(i_r, t)?,
        None => 0.0,
    };
    let loss = LossBreakdown::combine(weights, parts, id, per, pix);
    if !loss.total.is_finite() || !with_grad {
        return Ok((loss, None));
    }

    // d/d pixels of I_r.
    let mut g_img = vec![0.0; i_r.pixels.len()];
    if weights.reenactment != 0.0 {
        let g_shape = reenactment_loss_grad(&s_r, &s_gt, &pairs);
        let unposed = shape_model.reconstruct_shape(&p_r.identity, &p_r.expression)?;
        let (g_unposed, g_theta) = apply_pose_vjp(&unposed, p_r.theta, &g_shape);
        let (g_id, g_exp) = shape_model.reconstruct_vjp(&g_unposed);
        let mut g_p = Vec::with_capacity(PoseParams::LEN);
        g_p.extend_from_slice(&g_theta);
        g_p.extend_from_slice(&g_exp);
        g_p.extend_from_slice(&g_id);
        let g = f.reg.estimate_vjp(&reg_tape, &g_p);
        axpy(&mut g_img, weights.reenactment, &g);
    }
    if weights.identity != 0.0 {
        let neg: Vec<f64> = e_ref.iter().map(|v| -v).collect();
        axpy(&mut g_img, weights.identity, &f.emb.embed_vjp(&e_tape, &neg));
    }
    if weights.perceptual != 0.0 {
        axpy(&mut g_img, weights.perceptual, per_grad.as_ref().expect("computed with grad"));
    }
    if let (Some(t), true) = (&s.i_t, weights.pixel != 0.0) {
        let n = i_r.pixels.len() as f64;
        for (g, (x, y)) in g_img.iter_mut().zip(i_r.pixels.iter().zip(&t.pixels)) {
            *g += weights.pixel * sign(x - y) / n;
        }
    }

    let g_q = f.gen.render_vjp_q(&q_r, &tape, &g_img);
    let g_w = f.gen.semantic_vjp(&g_q);
    let mut grad = vec![0.0; DirectionMatrix::ROWS * DirectionMatrix::COLS];
    for (r, gw) in g_w.iter().enumerate() {
        for (j, d) in s.dp.iter().enumerate() {
            grad[r * DirectionMatrix::COLS + j] = gw * d;
        }
    }
    Ok((loss, Some(grad)))
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

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Mean loss over a batch and, optionally, its gradient on `A`. Samples are
/// reduced in order, so the result does not depend on scheduling.
pub fn batch_loss(f: Frozen, a: &DirectionMatrix, batch: &[ResolvedSample], weights: &LossWeights, with_grad: bool) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let mut total = LossBreakdown::default();
    let mut grad = with_grad.then(|| vec![0.0; DirectionMatrix::ROWS * DirectionMatrix::COLS]);
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let (l, g) = sample_loss(f, a, s, weights, with_grad)?;
        total.add_scaled(&l, scale);
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            axpy(acc, scale, &g);
        }
    }
    Ok((total, grad))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub wall_ms: f64,
}

/// Writes log records as JSON lines.
pub struct JsonlLog<W: Write> {
    out: W,
}

impl<W: Write> JsonlLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, r: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r).map_err(|e| Error::Io(e.into()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

/// Optimizes `init` under `config`, calling `on_record` after every iteration.
///
/// Identical inputs give an identical result; wall times in the log vary.
pub fn train_directions(
    f: Frozen,
    pools: &TrainingPools,
    init: DirectionMatrix,
    config: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<(DirectionMatrix, Vec<LogRecord>)> {
    config.validate()?;
    let mut a = init;
    let mut log = Vec::with_capacity(config.iterations);
    if config.iterations == 0 {
        return Ok((a, log));
    }
    let mut opt = ColumnAdam::new(DirectionMatrix::ROWS, DirectionMatrix::COLS, config.learning_rate);
    let mut r = rng::derive(config.seed, 0x7a);
    let start = Instant::now();
    for iteration in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let s = sample_training_pair(config, &mut r, pools, a.stats.a)?;
            batch.push(resolve(&a, pools, &s)?);
        }
        let (loss, grad) = batch_loss(f, &a, &batch, &config.weights, true)?;
        let grad = grad.expect("requested");
        if !loss.total.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite { iteration });
        }
        for (w, u) in a.matrix.iter_mut().zip(opt.step(&grad)) {
            *w += u;
        }
        let record = LogRecord { iteration, loss, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        on_record(&record)?;
        log.push(record);
    }
    Ok((a, log))
}

/// Continues training `a` on paired frames with the paired loss.
pub fn finetune_paired(
    f: Frozen,
    a: DirectionMatrix,
    paired: &[(PoolEntry, PoolEntry)],
    config: &TrainConfig,
    on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<(DirectionMatrix, Vec<LogRecord>)> {
    if paired.is_empty() {
        return Err(Error::EmptyPool("paired frames"));
    }
    let pools = TrainingPools { paired: paired.to_vec(), ..Default::default() };
    let config = TrainConfig { scheme: Scheme::Paired, ..config.clone() };
    train_directions(f, &pools, a, &config, on_record)
}
