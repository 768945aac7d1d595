//! Image analysis networks: a pose regressor and frozen random-feature nets
//! for identity embedding and perceptual distance.
//!
//! The regressor is analysis-by-synthesis. A learned network (logit stem,
//! PCA, MLP) predicts render parameters, and a Levenberg-Marquardt fit of
//! the regressor's own frozen copy of the renderer refines them. Gradients
//! with respect to pixels pass through the fit by implicit differentiation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FaceImage, PIXELS};
use crate::linalg::{dot, gram_and_rhs, quantile};
use crate::nn::{avg_pool2, avg_pool2_vjp, Adam, Conv3, FeatureMap, Mlp, Pca};
use crate::rng;
use crate::shape3d::PoseParams;
use crate::toygen::{RenderParams, Renderer, ToyGenerator};
use crate::IMAGE_SIZE;

const LOGIT_EPS: f64 = 1e-4;
/// Per-pixel RMS residual above which the refinement restarts.
const RESTART_RMS: f64 = 0.012;
/// LM stops once the accepted step's largest component falls below this.
const STEP_TOL: f64 = 1e-11;
/// Steps below this reuse the previous Jacobian.
const REFRESH_TOL: f64 = 1e-5;
const MAX_POLISH: usize = 10;
/// `(theta axis, offset in degrees)` restart guesses, tried in order.
const RESTART_OFFSETS: [(usize, f64); 6] = [(0, 20.0), (0, -20.0), (0, 40.0), (0, -40.0), (1, 20.0), (1, -20.0)];

/// Stem: per-pixel logit, then 2x2 average pooling.
fn stem(image: &FaceImage) -> Vec<f64> {
    let logits: Vec<f64> = image
        .pixels
        .iter()
        .map(|v| {
            let p = v.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
            (p / (1.0 - p)).ln()
        })
        .collect();
    avg_pool2(&FeatureMap { channels: 3, size: IMAGE_SIZE, data: logits }).data
}

/// Training configuration for the pose regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub n_train: usize,
    pub n_holdout: usize,
    pub pca_samples: usize,
    pub components: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Training codes draw `z` with a scale uniform in this interval.
    pub z_scale: (f64, f64),
    /// Levenberg-Marquardt iteration cap for the refinement.
    pub fit_iterations: usize,
    /// Required held-out RMSE as a fraction of each parameter's range.
    pub rmse_fraction: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            n_train: 6000,
            n_holdout: 500,
            pca_samples: 3000,
            components: 128,
            hidden: 192,
            epochs: 20,
            batch: 32,
            learning_rate: 1e-3,
            z_scale: (0.8, 1.5),
            fit_iterations: 12,
            rmse_fraction: 0.02,
            seed: 1,
        }
    }
}

/// Image to `(theta, expression, identity)` regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRegressor {
    pub pca: Pca,
    pub mlp: Mlp,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    /// Frozen copy of the renderer used by the refinement.
    pub renderer: Renderer,
    pub fit_iterations: usize,
}

/// Values retained by a regressor forward pass.
pub struct RegressorTape {
    pub params: PoseParams,
    pub fit: RenderFit,
}

/// Held-out quality of a trained regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorReport {
    /// Per-parameter RMSE divided by the 1%..99% range of that parameter.
    pub rmse_fraction: Vec<f64>,
    /// RMSE of the learned initial guess alone, same units.
    pub initial_rmse_fraction: Vec<f64>,
    pub ranges: Vec<f64>,
    pub worst: f64,
}

impl PoseRegressor {
    /// The learned network's guess, before refinement.
    pub fn initial_guess(&self, image: &FaceImage) -> RenderParams {
        let out = self.mlp.forward(&self.pca.transform(&stem(image)));
        let v: Vec<f64> = out.iter().enumerate().map(|(i, o)| o * self.target_std[i] + self.target_mean[i]).collect();
        RenderParams::from_slice(&v).expect("regressor output width")
    }

    pub fn estimate(&self, image: &FaceImage) -> PoseParams {
        self.estimate_render_params(image).pose
    }

    /// Full refined render parameters, nuisance included.
    pub fn estimate_render_params(&self, image: &FaceImage) -> RenderParams {
        self.refine(image).params
    }

    /// Fits from the learned guess; when the residual stays large, retries from
    /// guesses with shifted yaw and pitch and keeps the best fit.
    fn refine(&self, image: &FaceImage) -> RenderFit {
        let init = self.initial_guess(image);
        let mut best = fit_render_params(&self.renderer, image, &init, self.fit_iterations);
        if best.rms_residual() <= RESTART_RMS {
            return best;
        }
        for (axis, offset) in RESTART_OFFSETS {
            let mut start = init.clone();
            start.pose.theta[axis] += offset;
            let fit = fit_render_params(&self.renderer, image, &start, self.fit_iterations);
            if fit.cost < best.cost {
                best = fit;
            }
            if best.rms_residual() <= RESTART_RMS {
                break;
            }
        }
        best
    }

    pub fn estimate_with_tape(&self, image: &FaceImage) -> RegressorTape {
        let fit = self.refine(image);
        RegressorTape { params: fit.params.pose.clone(), fit }
    }

    /// Gradient on pixels of `<grad_params, estimate(image)>`, with `grad_params`
    /// ordered as [`PoseParams::to_vec`].
    ///
    /// At the fitted optimum `J (render(r) - image) = 0`; treating the residual
    /// curvature as negligible gives `dr / dimage = (J J^T)^-1 J`.
    pub fn estimate_vjp(&self, tape: &RegressorTape, grad_params: &[f64]) -> Vec<f64> {
        let n = RenderParams::LEN;
        let jac = &tape.fit.jacobian;
        let (h, _) = gram_and_rhs(jac, n, PIXELS, &vec![0.0; PIXELS]);
        let mut g = DVector::zeros(n);
        for (i, v) in grad_params.iter().enumerate() {
            g[i] = *v;
        }
        let y = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => h.pseudo_inverse(1e-12).expect("finite matrix") * g,
        };
        let mut out = vec![0.0; PIXELS];
        for (i, yi) in y.iter().enumerate() {
            for (o, j) in out.iter_mut().zip(&jac[i * PIXELS..(i + 1) * PIXELS]) {
                *o += yi * j;
            }
        }
        out
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(
            self.mlp
                .params()
                .iter()
                .chain(&self.pca.projection)
                .chain(&self.pca.mean)
                .chain(&self.target_mean)
                .chain(&self.target_std)
                .chain(&self.renderer.synthesis.to_vec()),
        )
    }
}

fn labelled_codes(gen: &ToyGenerator, n: usize, seed: u64, z_scale: (f64, f64)) -> Vec<crate::toygen::LatentCode> {
    use rand::Rng;
    let zs = crate::toygen::sample_z(n, seed);
    let mut r = rng::derive(seed, 0x51);
    zs.iter()
        .map(|z| {
            let s = r.random_range(z_scale.0..=z_scale.1);
            let zz = crate::toygen::LatentCode { kind: z.kind, data: z.data.iter().map(|v| v * s).collect() };
            crate::toygen::broadcast_wplus(&gen.map_to_w(&zz).expect("z code")).expect("w code")
        })
        .collect()
}

fn render_label(gen: &ToyGenerator, code: &crate::toygen::LatentCode) -> (FaceImage, Vec<f64>) {
    let params = gen.decode(&gen.semantic_params(code).expect("wplus"));
    (gen.renderer.render(&params), params.to_vec())
}

/// Trains a regressor on generator renders labelled by the generator's own
/// semantic parameters. Fails if the held-out RMSE of any pose, expression or
/// identity parameter reaches `rmse_fraction` of its range.
pub fn train_regressor(gen: &ToyGenerator, config: &RegressorConfig) -> Result<(PoseRegressor, RegressorReport)> {
    let (reg, report) = fit_regressor(gen, config);
    if report.worst >= config.rmse_fraction {
        return Err(Error::TrainingFailure {
            what: "pose regressor",
            metric: "held-out RMSE / range",
            achieved: report.worst,
            threshold: config.rmse_fraction,
        });
    }
    Ok((reg, report))
}

/// Training without the quality gate; returns the model and its held-out report.
pub fn fit_regressor(gen: &ToyGenerator, config: &RegressorConfig) -> (PoseRegressor, RegressorReport) {
    use rand::seq::SliceRandom;
    let codes = labelled_codes(gen, config.n_train, config.seed, config.z_scale);
    let holdout_codes = labelled_codes(gen, config.n_holdout, config.seed ^ 0xff00_ff00, config.z_scale);

    let mut r = rng::derive(config.seed, 0x70);
    let pca_n = config.pca_samples.min(codes.len());
    let pca_stems: Vec<Vec<f64>> = codes[..pca_n].iter().map(|c| stem(&render_label(gen, c).0)).collect();
    let pca = Pca::fit(&pca_stems, config.components, 4, &mut r);
    drop(pca_stems);
    let mut feats = Vec::with_capacity(codes.len());
    let mut labels = Vec::with_capacity(codes.len());
    for c in &codes {
        let (img, label) = render_label(gen, c);
        feats.push(pca.transform(&stem(&img)));
        labels.push(label);
    }

    let width = RenderParams::LEN;
    let n = labels.len() as f64;
    let mut target_mean = vec![0.0; width];
    let mut target_std = vec![0.0; width];
    for l in &labels {
        for (m, v) in target_mean.iter_mut().zip(l) {
            *m += v / n;
        }
    }
    for l in &labels {
        for i in 0..width {
            target_std[i] += (l[i] - target_mean[i]).powi(2) / n;
        }
    }
    target_std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-9));
    let targets: Vec<Vec<f64>> =
        labels.iter().map(|l| (0..width).map(|i| (l[i] - target_mean[i]) / target_std[i]).collect()).collect();

    let mut mlp = Mlp::new(&[config.components, config.hidden, config.hidden, width], &mut r);
    let mut opt = Adam::new(mlp.param_count(), config.learning_rate);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let total = (config.epochs * feats.len().div_ceil(config.batch)).max(1);
    let mut step = 0;
    let mut grad = vec![0.0; mlp.param_count()];
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let tape = mlp.forward_tape(&feats[i]);
                let g: Vec<f64> =
                    tape.output().iter().zip(&targets[i]).map(|(o, t)| 2.0 * (o - t) / chunk.len() as f64).collect();
                mlp.backward(&tape, &g, &mut grad);
            }
            let progress = step as f64 / total as f64;
            opt.lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let update = opt.step(&grad);
            mlp.apply_update(&update);
            step += 1;
        }
    }

    let reg = PoseRegressor {
        pca,
        mlp,
        target_mean,
        target_std,
        renderer: gen.renderer.clone(),
        fit_iterations: config.fit_iterations,
    };
    let holdout: Vec<(FaceImage, Vec<f64>)> = holdout_codes.iter().map(|c| render_label(gen, c)).collect();
    let report = evaluate_regressor(&reg, &holdout, &labels);
    (reg, report)
}

/// `reference` labels define each parameter's range.
fn evaluate_regressor(reg: &PoseRegressor, holdout: &[(FaceImage, Vec<f64>)], reference: &[Vec<f64>]) -> RegressorReport {
    let width = PoseParams::LEN;
    let ranges: Vec<f64> = (0..width)
        .map(|i| {
            let col: Vec<f64> = reference.iter().map(|l| l[i]).collect();
            quantile(&col, 0.99) - quantile(&col, 0.01)
        })
        .collect();
    let mut sq = vec![0.0; width];
    let mut sq0 = vec![0.0; width];
    for (img, label) in holdout {
        let init = reg.initial_guess(img).pose.to_vec();
        let est = reg.estimate(img).to_vec();
        for i in 0..width {
            sq[i] += (est[i] - label[i]).powi(2) / holdout.len() as f64;
            sq0[i] += (init[i] - label[i]).powi(2) / holdout.len() as f64;
        }
    }
    let rmse_fraction: Vec<f64> = sq.iter().zip(&ranges).map(|(s, r)| s.sqrt() / r).collect();
    let initial_rmse_fraction: Vec<f64> = sq0.iter().zip(&ranges).map(|(s, r)| s.sqrt() / r).collect();
    let worst = rmse_fraction.iter().cloned().fold(0.0, f64::max);
    RegressorReport { rmse_fraction, initial_rmse_fraction, ranges, worst }
}

/// Held-out report for an already trained regressor on fresh prior samples.
pub fn regressor_report(gen: &ToyGenerator, reg: &PoseRegressor, n: usize, seed: u64) -> RegressorReport {
    let set: Vec<(FaceImage, Vec<f64>)> = gen.sample_wplus(n, seed).iter().map(|c| render_label(gen, c)).collect();
    let labels: Vec<Vec<f64>> = set.iter().map(|(_, l)| l.clone()).collect();
    evaluate_regressor(reg, &set, &labels)
}

/// Outcome of fitting render parameters to an image.
#[derive(Clone, Debug)]
pub struct RenderFit {
    pub params: RenderParams,
    /// `0.5 * |render(params) - image|^2`.
    pub cost: f64,
    pub iterations: usize,
    /// Render Jacobian at `params`, `RenderParams::LEN` rows of `PIXELS`.
    pub jacobian: Vec<f64>,
}

impl RenderFit {
    pub fn rms_residual(&self) -> f64 {
        (2.0 * self.cost / PIXELS as f64).sqrt()
    }
}

/// Levenberg-Marquardt fit of render parameters to `image`, starting at `init`.
pub fn fit_render_params(renderer: &Renderer, image: &FaceImage, init: &RenderParams, max_iterations: usize) -> RenderFit {
    let n = RenderParams::LEN;
    let residual_of = |img: &FaceImage| -> Vec<f64> { img.pixels.iter().zip(&image.pixels).map(|(a, b)| a - b).collect() };
    let mut params = init.clone();
    let mut jac = Vec::new();
    let img = renderer.render_jacobian_into(&params, &mut jac);
    let mut res = residual_of(&img);
    let mut cost = 0.5 * dot(&res, &res);
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut polish = 0;
    let mut h = None;
    while iterations < max_iterations && polish < MAX_POLISH {
        let (hm, g) = match &h {
            Some(hm) => (hm, gram_and_rhs(&jac, n, PIXELS, &res).1),
            None => {
                let (hm, g) = gram_and_rhs(&jac, n, PIXELS, &res);
                (&*h.insert(hm), g)
            }
        };
        let g = DVector::from_vec(g);
        let mut accepted = None;
        for _ in 0..10 {
            let mut damped = hm.clone();
            for d in 0..n {
                damped[(d, d)] += lambda * hm[(d, d)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let mut v = params.to_vec();
            for (p, s) in v.iter_mut().zip(step.iter()) {
                *p += s;
            }
            let trial = RenderParams::from_slice(&v).expect("fixed width");
            let trial_res = residual_of(&renderer.render(&trial));
            let trial_cost = 0.5 * dot(&trial_res, &trial_res);
            if trial_cost < cost {
                params = trial;
                cost = trial_cost;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = Some((step.amax(), trial_res));
                break;
            }
            lambda *= 10.0;
        }
        let Some((step_size, trial_res)) = accepted else { break };
        if step_size < STEP_TOL {
            break;
        }
        // Small steps keep the current Jacobian, which is then accurate to the
        // step size; large ones refresh it.
        if step_size < REFRESH_TOL {
            polish += 1;
            res = trial_res;
        } else {
            iterations += 1;
            h = None;
            let img = renderer.render_jacobian_into(&params, &mut jac);
            res = residual_of(&img);
        }
    }
    RenderFit { params, cost, iterations, jacobian: jac }
}

pub const EMBED_DIM: usize = 32;
const EMBED_CHANNELS: usize = 8;

/// Frozen random convolutional features at 64, 32 and 16 pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEmbedder {
    pub convs: [Conv3; 3],
    /// Row-major `EMBED_DIM x 3 * EMBED_CHANNELS`.
    pub head: Vec<f64>,
    /// Subtracted before normalization so unrelated faces are not all aligned.
    pub center: Vec<f64>,
    pub seed: u64,
}

/// Activations at each scale, after tanh.
pub struct FeatureTape {
    pub features: Vec<FeatureMap>,
}

pub struct EmbedTape {
    features: FeatureTape,
    raw: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl FrozenEmbedder {
    /// Builds the nets and calibrates the embedding center on generator renders.
    pub fn new(seed: u64, gen: &ToyGenerator) -> Self {
        let mut r = rng::derive(seed, 0xe3);
        let convs = [
            Conv3::new(3, EMBED_CHANNELS, &mut r),
            Conv3::new(EMBED_CHANNELS, EMBED_CHANNELS, &mut r),
            Conv3::new(EMBED_CHANNELS, EMBED_CHANNELS, &mut r),
        ];
        let head = rng::normal_vec(&mut r, EMBED_DIM * 3 * EMBED_CHANNELS, (1.0 / (3.0 * EMBED_CHANNELS as f64)).sqrt());
        let mut emb = Self { convs, head, center: vec![0.0; EMBED_DIM], seed };
        let codes = gen.sample_wplus(300, seed ^ 0xce);
        let mut center = vec![0.0; EMBED_DIM];
        for c in &codes {
            let raw = emb.raw_embedding(&emb.features(&gen.generate(c).expect("wplus")));
            for (m, v) in center.iter_mut().zip(raw) {
                *m += v / codes.len() as f64;
            }
        }
        emb.center = center;
        emb
    }

    pub fn features(&self, image: &FaceImage) -> FeatureTape {
        let mut x = FeatureMap { channels: 3, size: IMAGE_SIZE, data: image.pixels.iter().map(|v| v - 0.5).collect() };
        let mut features = Vec::with_capacity(3);
        for (s, conv) in self.convs.iter().enumerate() {
            if s > 0 {
                x = avg_pool2(&x);
            }
            let mut y = conv.forward(&x);
            y.data.iter_mut().for_each(|v| *v = v.tanh());
            x = y.clone();
            features.push(y);
        }
        FeatureTape { features }
    }

    /// Gradient on pixels given gradients on each scale's features.
    pub fn features_vjp(&self, tape: &FeatureTape, grads: &[FeatureMap]) -> Vec<f64> {
        let mut carry: Option<FeatureMap> = None;
        for s in (0..3).rev() {
            let mut g = grads[s].clone();
            if let Some(c) = carry.take() {
                for (a, b) in g.data.iter_mut().zip(&c.data) {
                    *a += b;
                }
            }
            for (gi, y) in g.data.iter_mut().zip(&tape.features[s].data) {
                *gi *= 1.0 - y * y;
            }
            let gx = self.convs[s].input_vjp(&g);
            carry = Some(if s > 0 { avg_pool2_vjp(&gx) } else { gx });
        }
        carry.expect("three scales").data
    }

    fn pooled(tape: &FeatureTape) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * EMBED_CHANNELS);
        for f in &tape.features {
            let plane = f.size * f.size;
            for c in 0..f.channels {
                v.push(f.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64);
            }
        }
        v
    }

    fn raw_embedding(&self, tape: &FeatureTape) -> Vec<f64> {
        let pooled = Self::pooled(tape);
        let width = pooled.len();
        (0..EMBED_DIM).map(|k| dot(&self.head[k * width..(k + 1) * width], &pooled) - self.center[k]).collect()
    }

    pub fn identity_embed(&self, image: &FaceImage) -> Vec<f64> {
        self.embed_with_tape(image).embedding
    }

    pub fn embed_with_tape(&self, image: &FaceImage) -> EmbedTape {
        let features = self.features(image);
        let raw = self.raw_embedding(&features);
        let n = crate::linalg::norm(&raw).max(1e-12);
        let embedding = raw.iter().map(|v| v / n).collect();
        EmbedTape { features, raw, embedding }
    }

    /// Gradient on pixels of `<g, identity_embed(image)>`.
    pub fn embed_vjp(&self, tape: &EmbedTape, g: &[f64]) -> Vec<f64> {
        let n = crate::linalg::norm(&tape.raw).max(1e-12);
        let e = &tape.embedding;
        let ge = dot(g, e);
        let graw: Vec<f64> = g.iter().zip(e).map(|(gi, ei)| (gi - ge * ei) / n).collect();
        let width = 3 * EMBED_CHANNELS;
        let mut gpooled = vec![0.0; width];
        for k in 0..EMBED_DIM {
            for (gp, h) in gpooled.iter_mut().zip(&self.head[k * width..(k + 1) * width]) {
                *gp += graw[k] * h;
            }
        }
        let grads: Vec<FeatureMap> = tape
            .features
            .features
            .iter()
            .enumerate()
            .map(|(s, f)| {
                let plane = f.size * f.size;
                let mut data = vec![0.0; f.data.len()];
                for c in 0..f.channels {
                    let v = gpooled[s * EMBED_CHANNELS + c] / plane as f64;
                    data[c * plane..(c + 1) * plane].iter_mut().for_each(|d| *d = v);
                }
                FeatureMap { channels: f.channels, size: f.size, data }
            })
            .collect();
        self.features_vjp(&tape.features, &grads)
    }

    /// Sum over scales of the mean squared feature difference.
    pub fn perceptual_distance(&self, a: &FaceImage, b: &FaceImage) -> f64 {
        perceptual_from_features(&self.features(a), &self.features(b))
    }

    /// Distance and its gradient with respect to the pixels of `a`, with `b`'s features precomputed.
    pub fn perceptual_distance_grad(&self, a: &FaceImage, fb: &FeatureTape) -> (f64, Vec<f64>) {
        let fa = self.features(a);
        let d = perceptual_from_features(&fa, fb);
        let grads: Vec<FeatureMap> = fa
            .features
            .iter()
            .zip(&fb.features)
            .map(|(x, y)| {
                let n = x.data.len() as f64;
                FeatureMap {
                    channels: x.channels,
                    size: x.size,
                    data: x.data.iter().zip(&y.data).map(|(p, q)| 2.0 * (p - q) / n).collect(),
                }
            })
            .collect();
        (d, self.features_vjp(&fa, &grads))
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(
            self.convs
                .iter()
                .flat_map(|c| c.weight.iter().chain(&c.bias))
                .chain(&self.head)
                .chain(&self.center),
        )
    }
}

pub fn perceptual_from_features(a: &FeatureTape, b: &FeatureTape) -> f64 {
    a.features
        .iter()
        .zip(&b.features)
        .map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.data.len() as f64)
        .sum()
}

/// Hash of the bit patterns of a weight sequence.
pub fn fingerprint<'a>(values: impl Iterator<Item = &'a f64>) -> u64 {
    use std::hash::{DefaultHasher, Hasher};
    let mut h = DefaultHasher::new();
    for v in values {
        h.write_u64(v.to_bits());
    }
    h.finish()
}
