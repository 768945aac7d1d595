//! End-to-end acceptance checks.
//!
//! Runs the full pipeline through the `posedir` binary in a scratch workspace,
//! then scores each criterion against oracles written here. Prints one
//! PASS/FAIL line per criterion and fails if any criterion fails.
//!
//! Set `POSEDIR_ACCEPTANCE_WORKSPACE` to keep the workspace at a fixed path;
//! pipeline steps whose outputs already exist there are skipped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use posedir_core::checkpoint::Persist;
use posedir_core::directions::{pose_of, DirectionMatrix};
use posedir_core::estimator::{FrozenEmbedder, PoseRegressor};
use posedir_core::evaluation::{
    bounding_box, csim, disentanglement_report, expression_error, linearity_analysis, nme, pose_error,
    reenactment_transfer_error,
};
use posedir_core::image::{FaceImage, PIXELS};
use posedir_core::inversion::{pivotal_tune, real_analog_frame, Encoder, RealAnalogCorpus, TuneConfig};
use posedir_core::shape3d::{
    pair_distance_loss, reenactment_loss, shape_loss, LandmarkPairTable, PoseParams, Shape3D, ShapeModel,
};
use posedir_core::toygen::{LatentCode, ToyGenerator};
use posedir_core::training::{batch_loss, Frozen, LossWeights, PoolEntry, ResolvedSample, TrainConfig};
use posedir_core::{EXP_DIM, ID_DIM, NUM_LANDMARKS, POSE_DIM, Q_DIM, WPLUS_DIM};

const BIN: &str = env!("CARGO_BIN_EXE_posedir");

const GEN_SEED: &str = "7";
const TRAIN_ITERATIONS: &str = "2000";
const TRAIN_BATCH: &str = "8";
const MAX_ANGLE_DEG: f64 = 10.0;
const MAX_TRAIN_TIME: Duration = Duration::from_secs(15 * 60);
const MAX_GRAD_TIME: Duration = Duration::from_secs(60);
const GRAD_REL_TOL: f64 = 1e-3;
const DISENTANGLE_SOURCES: usize = 200;
const MAX_OFF_TARGET: f64 = 0.05;
const MIN_ACHIEVED: f64 = 0.9;
const LINEARITY_EDITS: usize = 500;
const MIN_CORRELATION: f64 = 0.85;
const EVAL_PAIRS: usize = 100;
const TUNE_IMAGES: usize = 20;
const TUNE_STEPS: usize = 200;
const MAX_TUNED_ERROR_RATIO: f64 = 1.1;
const METRIC_TOL: f64 = 1e-9;
const METRIC_INPUTS: usize = 100;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn posedir(ws: &Path, args: &[&str]) -> Duration {
    let start = Instant::now();
    let out = Command::new(BIN).arg("--workspace").arg(ws).args(args).output().expect("spawn posedir");
    assert!(
        out.status.success(),
        "posedir {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    start.elapsed()
}

/// Runs `args` unless `output` already exists in a kept workspace.
fn step(ws: &Path, output: &str, args: &[&str]) -> Option<Duration> {
    if ws.join(output).exists() {
        eprintln!("reusing {output}");
        return None;
    }
    eprintln!("running posedir {}", args.join(" "));
    let t = posedir(ws, args);
    eprintln!("  done in {:.1}s", t.as_secs_f64());
    Some(t)
}

/// Wall time of the last record in a training log.
fn logged_train_time(path: &Path) -> Duration {
    let text = fs::read_to_string(path).expect("training log");
    let last: serde_json::Value = serde_json::from_str(text.lines().last().expect("nonempty log")).unwrap();
    Duration::from_secs_f64(last["wall_ms"].as_f64().unwrap() / 1e3)
}

struct Trained {
    gen: ToyGenerator,
    reg: PoseRegressor,
    emb: FrozenEmbedder,
    enc: Encoder,
    synthetic: DirectionMatrix,
    mixed: DirectionMatrix,
    paired: DirectionMatrix,
    eval_corpus: RealAnalogCorpus,
    synthetic_time: Duration,
}

fn pipeline(ws: &Path) -> Trained {
    fs::create_dir_all(ws).unwrap();
    step(ws, "generator.ldir", &["--seed", GEN_SEED, "init"]);
    step(ws, "regressor.ldir", &["--seed", "1", "train-regressor"]);
    step(ws, "stats.ldir", &["--seed", "2", "calibrate", "--samples", "2000"]);
    let t = step(
        ws,
        "directions/synthetic.ldir",
        &["--seed", "3", "train-directions", "--scheme", "synthetic", "--iterations", TRAIN_ITERATIONS, "--batch-size", TRAIN_BATCH],
    );
    let synthetic_time = t.unwrap_or_else(|| logged_train_time(&ws.join("logs/synthetic.jsonl")));
    step(ws, "corpora/train/index.json", &["--seed", "4", "build-corpus", "--n", "200", "--name", "train"]);
    step(ws, "corpora/eval/index.json", &["--seed", "5", "build-corpus", "--n", "200", "--name", "eval"]);
    step(ws, "encoder.ldir", &["--seed", "6", "train-encoder", "--corpus", "train"]);
    step(
        ws,
        "directions/mixed.ldir",
        &["--seed", "3", "train-directions", "--scheme", "mixed", "--iterations", TRAIN_ITERATIONS, "--batch-size", TRAIN_BATCH],
    );
    step(ws, "directions/paired.ldir", &["--seed", "8", "finetune-paired", "--from", "mixed", "--name", "paired"]);

    let load_dir = |n: &str| DirectionMatrix::load(&ws.join(format!("directions/{n}.ldir"))).unwrap();
    Trained {
        gen: ToyGenerator::load(&ws.join("generator.ldir")).unwrap(),
        reg: PoseRegressor::load(&ws.join("regressor.ldir")).unwrap(),
        emb: FrozenEmbedder::load(&ws.join("embedder.ldir")).unwrap(),
        enc: Encoder::load(&ws.join("encoder.ldir")).unwrap(),
        synthetic: load_dir("synthetic"),
        mixed: load_dir("mixed"),
        paired: load_dir("paired"),
        eval_corpus: RealAnalogCorpus::load(&ws.join("corpora/eval")).unwrap(),
        synthetic_time,
    }
}

/// Principal angles in degrees between the column spaces of `a` and `b`.
fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let mut angles: Vec<f64> = s.iter().map(|c| c.clamp(-1.0, 1.0).acos().to_degrees()).collect();
    angles.sort_by(f64::total_cmp);
    angles
}

fn criterion_1(t: &Trained) -> Outcome {
    // The closed form: the pose rows of the semantic map, one per column.
    let mut star = DMatrix::zeros(WPLUS_DIM, POSE_DIM);
    for k in 0..POSE_DIM {
        for (i, v) in t.gen.semantic_row(k).iter().enumerate() {
            star[(i, k)] = *v;
        }
    }
    let learned = DMatrix::from_fn(WPLUS_DIM, POSE_DIM, |i, j| t.synthetic.matrix[i * POSE_DIM + j]);
    let angles = principal_angles(&learned, &star);
    let max = angles.iter().copied().fold(0.0, f64::max);
    let secs = t.synthetic_time.as_secs_f64();
    Outcome {
        id: 1,
        name: "direction recovery",
        pass: max < MAX_ANGLE_DEG && t.synthetic_time < MAX_TRAIN_TIME,
        detail: format!("max principal angle {max:.2} deg (< {MAX_ANGLE_DEG}), training {secs:.0}s (< 900s)"),
    }
}

fn criterion_2(t: &Trained) -> Outcome {
    let mut ok = true;
    for (i, w) in t.gen.sample_wplus(20, 91).iter().enumerate() {
        let img = t.gen.generate(w).unwrap();
        let p = pose_of(&t.reg.estimate(&img));
        for a in [&t.synthetic, &t.mixed, &t.paired] {
            let w_r = a.reenact_code(w, &p, &p).unwrap();
            let same_code = w_r.data.iter().zip(&w.data).all(|(x, y)| x.to_bits() == y.to_bits());
            let out = t.gen.generate(&w_r).unwrap();
            let same_image = out.pixels.iter().zip(&img.pixels).all(|(x, y)| x.to_bits() == y.to_bits());
            if !(same_code && same_image) {
                ok = false;
                eprintln!("criterion 2: code {i} changed under a zero delta");
            }
        }
    }
    Outcome { id: 2, name: "zero delta", pass: ok, detail: "20 codes x 3 matrices, codes and renders bit-identical".into() }
}

fn criterion_3(t: &Trained) -> Outcome {
    let start = Instant::now();
    let f = Frozen { gen: &t.gen, reg: &t.reg, emb: &t.emb };
    let a = &t.synthetic;
    let codes = t.gen.sample_wplus(4, 92);
    let entries: Vec<PoolEntry> = codes.into_iter().map(|c| PoolEntry::from_code(f, c)).collect();
    let batch = [
        ResolvedSample::unpaired(a, &entries[0], &entries[1].params),
        ResolvedSample::unpaired(a, &entries[2], &entries[3].params),
    ];
    let w = LossWeights::default();
    let loss = |m: &DirectionMatrix| batch_loss(f, m, &batch, &w, false).unwrap().0.total;
    let g = batch_loss(f, a, &batch, &w, true).unwrap().1.unwrap();
    let h = 1e-4;
    let mut r = StdRng::seed_from_u64(93);

    // Single entries, then random directions through all entries.
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..60 {
        let k = r.random_range(0..g.len());
        let (mut plus, mut minus) = (a.clone(), a.clone());
        plus.matrix[k] += h;
        minus.matrix[k] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        num += (fd - g[k]).powi(2);
        den += fd.powi(2);
    }
    let entry_err = (num / den).sqrt();
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..10 {
        let d: Vec<f64> = (0..g.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (mut plus, mut minus) = (a.clone(), a.clone());
        for (k, v) in d.iter().enumerate() {
            plus.matrix[k] += h * v / dn;
            minus.matrix[k] -= h * v / dn;
        }
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let an: f64 = g.iter().zip(&d).map(|(x, y)| x * y / dn).sum();
        num += (fd - an).powi(2);
        den += fd.powi(2);
    }
    let dir_err = (num / den).sqrt();
    let elapsed = start.elapsed();
    Outcome {
        id: 3,
        name: "gradient audit",
        pass: entry_err < GRAD_REL_TOL && dir_err < GRAD_REL_TOL && elapsed < MAX_GRAD_TIME,
        detail: format!(
            "rel err {entry_err:.2e} over 60 entries, {dir_err:.2e} over 10 directions (< {GRAD_REL_TOL:e}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_4(t: &Trained) -> Outcome {
    let rep = disentanglement_report(&t.gen, &t.reg, &t.synthetic, 0, DISENTANGLE_SOURCES, 94).unwrap();
    // Recompute the medians from the raw records.
    let mut worst: f64 = 0.0;
    for j in (0..POSE_DIM).filter(|&j| j != 0) {
        let mut v: Vec<f64> = rep.records.iter().map(|r| r.deltas[j].abs()).collect();
        worst = worst.max(sorted_median(&mut v));
    }
    let mut frac: Vec<f64> =
        rep.records.iter().filter(|r| r.requested != 0.0).map(|r| r.achieved / r.requested).collect();
    let achieved = sorted_median(&mut frac);
    Outcome {
        id: 4,
        name: "disentanglement",
        pass: rep.records.len() == DISENTANGLE_SOURCES && worst < MAX_OFF_TARGET && achieved >= MIN_ACHIEVED,
        detail: format!(
            "worst median off-target {:.2}% of range (< 5%), median achieved yaw {:.1}% (>= 90%)",
            worst * 100.0,
            achieved * 100.0
        ),
    }
}

fn sorted_median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn criterion_5(t: &Trained) -> Outcome {
    let rep = linearity_analysis(&t.gen, &t.reg, &t.synthetic, LINEARITY_EDITS, 95).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for attr in [0usize, 1, 3, 4] {
        let a = rep.attributes.iter().find(|a| a.index == attr).expect("attribute scored");
        let (x, y): (Vec<f64>, Vec<f64>) = a.points.iter().copied().unzip();
        let r = brute_pearson(&x, &y);
        pass &= a.points.len() == LINEARITY_EDITS && r >= MIN_CORRELATION;
        parts.push(format!("{} {r:.3}", a.attribute));
    }
    Outcome { id: 5, name: "linearity", pass, detail: format!("{} (>= {MIN_CORRELATION})", parts.join(", ")) }
}

fn median_transfer_error(t: &Trained, a: &DirectionMatrix) -> f64 {
    let mut errors: Vec<f64> = t.eval_corpus.images[..2 * EVAL_PAIRS]
        .chunks(2)
        .map(|pair| {
            let w_s = t.enc.invert(&pair[0]);
            let p_s = pose_of(&t.reg.estimate(&pair[0]));
            let p_t = pose_of(&t.reg.estimate(&pair[1]));
            reenactment_transfer_error(&t.gen, &t.reg, a, &w_s, &p_s, &p_t).unwrap()
        })
        .collect();
    sorted_median(&mut errors)
}

fn criterion_6(t: &Trained) -> Outcome {
    let s = median_transfer_error(t, &t.synthetic);
    let m = median_transfer_error(t, &t.mixed);
    let p = median_transfer_error(t, &t.paired);
    Outcome {
        id: 6,
        name: "scheme ordering",
        pass: m <= s && p <= m,
        detail: format!("median pose-transfer error synthetic {s:.4}, mixed {m:.4}, paired {p:.4} (want paired <= mixed <= synthetic)"),
    }
}

/// `code` with the pose block of `donor`.
fn with_pose_of(gen: &ToyGenerator, code: &LatentCode, donor: &LatentCode) -> LatentCode {
    let (qs, qd) = (gen.semantic_params(code).unwrap(), gen.semantic_params(donor).unwrap());
    let mut dq = vec![0.0; Q_DIM];
    for k in 0..POSE_DIM {
        dq[k] = qd[k] - qs[k];
    }
    code.shifted(&gen.semantic_vjp(&dq)).unwrap()
}

fn criterion_7(t: &Trained) -> Outcome {
    let a = &t.synthetic;
    let donors = t.gen.sample_wplus(TUNE_IMAGES, 96);
    let config = TuneConfig { steps: TUNE_STEPS, ..TuneConfig::default() };
    let mut all_decrease = true;
    let (mut cs_plain, mut cs_tuned, mut err_plain, mut err_tuned) = (vec![], vec![], vec![], vec![]);
    for (i, donor) in donors.iter().enumerate() {
        let truth = &t.eval_corpus.truth[i];
        let clip_seed = 9000 + i as u64;
        let source = real_analog_frame(&t.gen, truth, clip_seed).unwrap();
        let target = real_analog_frame(&t.gen, &with_pose_of(&t.gen, truth, donor), clip_seed).unwrap();
        let w_s = t.enc.invert(&source);
        let out = pivotal_tune(&t.gen, &t.emb, &source, &w_s, &config).unwrap();
        all_decrease &= out.loss_after < out.loss_before;
        let p_s = pose_of(&t.reg.estimate(&source));
        let p_t = pose_of(&t.reg.estimate(&target));
        let w_r = a.reenact_code(&w_s, &p_s, &p_t).unwrap();
        cs_plain.push(csim(&t.emb, &target, &t.gen.generate(&w_r).unwrap()));
        cs_tuned.push(csim(&t.emb, &target, &out.generator.generate(&w_r).unwrap()));
        err_plain.push(reenactment_transfer_error(&t.gen, &t.reg, a, &w_s, &p_s, &p_t).unwrap());
        err_tuned.push(reenactment_transfer_error(&out.generator, &t.reg, a, &w_s, &p_s, &p_t).unwrap());
    }
    let (c0, c1) = (sorted_median(&mut cs_plain), sorted_median(&mut cs_tuned));
    let (e0, e1) = (sorted_median(&mut err_plain), sorted_median(&mut err_tuned));
    Outcome {
        id: 7,
        name: "pivotal tuning",
        pass: all_decrease && c1 > c0 && e1 <= MAX_TUNED_ERROR_RATIO * e0,
        detail: format!(
            "loss decreased on {}: {all_decrease}; median self csim {c0:.5} -> {c1:.5}; median transfer error {e0:.4} -> {e1:.4} (<= 1.1x)",
            TUNE_IMAGES
        ),
    }
}

fn random_landmarks(r: &mut StdRng) -> Vec<[f64; 2]> {
    (0..NUM_LANDMARKS).map(|_| [r.random_range(0.0..64.0), r.random_range(0.0..64.0)]).collect()
}

fn random_pose(r: &mut StdRng) -> PoseParams {
    PoseParams {
        theta: [r.random_range(-60.0..60.0), r.random_range(-40.0..40.0), r.random_range(-30.0..30.0)],
        expression: std::array::from_fn(|_| r.random_range(-1.0..1.0)),
        identity: std::array::from_fn(|_| r.random_range(-1.0..1.0)),
    }
}

fn criterion_8(t: &Trained) -> Outcome {
    let mut r = StdRng::seed_from_u64(97);
    let mut worst: f64 = 0.0;
    for _ in 0..METRIC_INPUTS {
        // NME against a loop over landmarks with a loop-computed box.
        let (pred, gt) = (random_landmarks(&mut r), random_landmarks(&mut r));
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &gt {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let mut sum = 0.0;
        for i in 0..NUM_LANDMARKS {
            let (dx, dy) = (pred[i][0] - gt[i][0], pred[i][1] - gt[i][1]);
            sum += (dx * dx + dy * dy).sqrt();
        }
        let want = sum / NUM_LANDMARKS as f64 / ((x1 - x0) * (y1 - y0)).sqrt() * 1000.0;
        worst = worst.max((nme(&pred, &gt, bounding_box(&gt)).unwrap() - want).abs());

        let (a, b) = (random_pose(&mut r), random_pose(&mut r));
        let mut pose = 0.0;
        for k in 0..3 {
            pose += (a.theta[k] - b.theta[k]).abs();
        }
        worst = worst.max((pose_error(&a, &b) - pose / 3.0).abs());
        let mut exp = 0.0;
        for k in 0..EXP_DIM {
            exp += (a.expression[k] - b.expression[k]).abs();
        }
        worst = worst.max((expression_error(&a, &b) - exp / EXP_DIM as f64).abs());

        let x = FaceImage::from_pixels((0..PIXELS).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let y = FaceImage::from_pixels((0..PIXELS).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let (ex, ey) = (t.emb.identity_embed(&x), t.emb.identity_embed(&y));
        let (mut d, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for k in 0..ex.len() {
            d += ex[k] * ey[k];
            nx += ex[k] * ex[k];
            ny += ey[k] * ey[k];
        }
        worst = worst.max((csim(&t.emb, &x, &y) - d / (nx.sqrt() * ny.sqrt())).abs());
    }
    let gt: Vec<[f64; 2]> = (0..NUM_LANDMARKS).map(|i| [i as f64, (i * 7 % 50) as f64]).collect();
    let pred: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    let forced = nme(&pred, &gt, (100.0, 100.0)).unwrap();
    Outcome {
        id: 8,
        name: "metric oracles",
        pass: worst < METRIC_TOL && (forced - 50.0).abs() < METRIC_TOL,
        detail: format!("worst deviation {worst:.1e} over {METRIC_INPUTS} inputs (< 1e-9), forced NME {forced}"),
    }
}

fn criterion_9(t: &Trained) -> Outcome {
    let model: &ShapeModel = &t.reg.renderer.shape_model;
    let mut r = StdRng::seed_from_u64(98);
    let mut fails = Vec::new();

    // Linearity: f(a p + b q) = a f(p) + b f(q) - (a + b - 1) mean.
    let mean = model.mean();
    let mut lin: f64 = 0.0;
    for _ in 0..20 {
        let v = |r: &mut StdRng, n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (pi, pe, qi, qe) = (v(&mut r, ID_DIM), v(&mut r, EXP_DIM), v(&mut r, ID_DIM), v(&mut r, EXP_DIM));
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, w)| a * u + b * w).collect::<Vec<f64>>();
        let lhs = model.reconstruct_shape(&mix(&pi, &qi), &mix(&pe, &qe)).unwrap();
        let sp = model.reconstruct_shape(&pi, &pe).unwrap();
        let sq = model.reconstruct_shape(&qi, &qe).unwrap();
        for n in 0..NUM_LANDMARKS {
            for k in 0..3 {
                let rhs = a * sp.vertices[n][k] + b * sq.vertices[n][k] - (a + b - 1.0) * mean.vertices[n][k];
                lin = lin.max((lhs.vertices[n][k] - rhs).abs());
            }
        }
    }
    if lin > 1e-12 {
        fails.push(format!("linearity {lin:.1e}"));
    }

    // Gram matrix of [S_i | S_e].
    let cols: Vec<Vec<f64>> =
        (0..ID_DIM).map(|j| model.identity_column(j)).chain((0..EXP_DIM).map(|j| model.expression_column(j))).collect();
    let mut gram: f64 = 0.0;
    for i in 0..cols.len() {
        for j in 0..cols.len() {
            let d: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
            gram = gram.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    if gram > 1e-10 {
        fails.push(format!("gram {gram:.1e}"));
    }

    // Pair tables, verbatim.
    let table = LandmarkPairTable::standard();
    let eye = [(37, 40), (38, 42), (39, 41), (43, 46), (44, 48), (45, 47)];
    let mouth = [(49, 55), (50, 60), (51, 59), (52, 58), (53, 57), (54, 56), (61, 65), (62, 68), (63, 67), (64, 66)];
    if table.eye_pairs != eye || table.mouth_pairs != mouth {
        fails.push("pair tables differ".into());
    }

    // Hand cases.
    let s = model.reconstruct_shape(&[0.1; ID_DIM], &[0.2; EXP_DIM]).unwrap();
    let mut opened = s.clone();
    opened.vertices[38 - 1][1] += 0.2;
    let eye_case = pair_distance_loss(&opened, &s, &table.eye_pairs).unwrap();
    let id_case = pair_distance_loss(&s, &s, &table.mouth_pairs).unwrap() + shape_loss(&s, &s) + reenactment_loss(&s, &s, &table);
    let mut one = s.clone();
    one.vertices[0][2] += 0.5;
    let sh_case = shape_loss(&one, &s);
    if (eye_case - 0.2).abs() > 1e-12 || id_case != 0.0 || (sh_case - 0.5).abs() > 1e-12 {
        fails.push(format!("hand cases eye {eye_case} identity {id_case} shape {sh_case}"));
    }

    // Per-pair and component-sum loops on random shapes.
    let mut loops: f64 = 0.0;
    let shape = |r: &mut StdRng| Shape3D {
        vertices: (0..NUM_LANDMARKS).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect(),
    };
    let l1 = |a: &[f64; 3], b: &[f64; 3]| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
    for _ in 0..20 {
        let (x, y) = (shape(&mut r), shape(&mut r));
        let pair_loop = |pairs: &[(usize, usize)]| {
            let mut acc = 0.0;
            for &(i, j) in pairs {
                acc += (l1(&x.vertices[i - 1], &x.vertices[j - 1]) - l1(&y.vertices[i - 1], &y.vertices[j - 1])).abs();
            }
            acc
        };
        let mut sh = 0.0;
        for n in 0..NUM_LANDMARKS {
            sh += l1(&x.vertices[n], &y.vertices[n]);
        }
        let (le, lm) = (pair_loop(&eye), pair_loop(&mouth));
        loops = loops.max((pair_distance_loss(&x, &y, &table.eye_pairs).unwrap() - le).abs());
        loops = loops.max((pair_distance_loss(&x, &y, &table.mouth_pairs).unwrap() - lm).abs());
        loops = loops.max((shape_loss(&x, &y) - sh).abs());
        loops = loops.max((reenactment_loss(&x, &y, &table) - (sh + le + lm)).abs());
        loops = loops.max((reenactment_loss(&x, &y, &table) - reenactment_loss(&y, &x, &table)).abs());
    }
    if loops > 1e-12 {
        fails.push(format!("loop oracles {loops:.1e}"));
    }
    let detail = if fails.is_empty() {
        format!("linearity {lin:.1e}, gram {gram:.1e}, tables verbatim, hand cases and loop oracles agree")
    } else {
        fails.join("; ")
    };
    Outcome { id: 9, name: "shape-loss suite", pass: fails.is_empty(), detail }
}

/// Every command, run twice on small settings; manifests must match byte for byte.
fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    let small_regressor = r#"{"n_train":400,"n_holdout":20,"pca_samples":300,"components":32,"hidden":32,"epochs":3,"batch":32,"learning_rate":0.001,"z_scale":[0.8,1.5],"fit_iterations":12,"rmse_fraction":1.0,"seed":1}"#;
    let small_encoder = format!(r#"{{"core":{small_regressor},"validation":4,"max_holdout_l1":1.0}}"#);
    fs::write(ws.join("reg.json"), small_regressor).unwrap();
    fs::write(ws.join("enc.json"), small_encoder).unwrap();
    let w = |p: &str| ws.join(p).to_string_lossy().into_owned();
    let (reg, enc, img0, img1) = (w("reg.json"), w("enc.json"), w("corpora/train/00000.png"), w("corpora/train/00001.png"));
    let commands: Vec<Vec<String>> = [
        vec!["init"],
        vec!["train-regressor", "--config", &reg],
        vec!["calibrate", "--samples", "120"],
        vec!["build-corpus", "--n", "12"],
        vec!["train-encoder", "--config", &enc],
        vec!["train-directions", "--iterations", "3", "--batch-size", "2", "--pool-size", "6"],
        vec!["train-directions", "--scheme", "mixed", "--iterations", "3", "--batch-size", "2", "--pool-size", "6"],
        vec!["finetune-paired", "--iterations", "2", "--pairs", "3"],
        vec!["invert", "--image", &img0, "--out", "out/w.ldir", "--preview", "out/w.png"],
        vec!["reenact", "--source", &img0, "--target", &img1, "--self", "--out", "out/r.png", "--tune-steps", "3"],
        vec!["edit", "--image", &img0, "--attr", "yaw", "--value", "-15", "--out", "out/e.png"],
        vec!["frontalize", "--image", &img1, "--out", "out/f.png"],
        vec!["eval", "--mode", "self", "--pairs", "2"],
        vec!["eval", "--mode", "cross", "--pairs", "2", "--corpus", "train"],
        vec!["analyze", "--linearity", "--n", "30"],
        vec!["analyze", "--disentanglement", "--attr", "smile", "--n", "3"],
    ]
    .into_iter()
    .map(|c| c.into_iter().map(String::from).collect())
    .collect();

    let mut mismatched = Vec::new();
    for (i, cmd) in commands.iter().enumerate() {
        let manifest = ws.join(format!("m/{i:02}-{}.json", cmd[0]));
        let mut args: Vec<&str> = vec!["--seed", "11", "--manifest", manifest.to_str().unwrap()];
        args.extend(cmd.iter().map(String::as_str));
        // Relative output paths resolve against the process's cwd; keep them in the workspace.
        let run = || {
            let out = Command::new(BIN).current_dir(ws).arg("--workspace").arg(ws).args(&args).output().unwrap();
            assert!(out.status.success(), "{}: {}", cmd.join(" "), String::from_utf8_lossy(&out.stderr));
            fs::read(&manifest).unwrap()
        };
        let (first, second) = (run(), run());
        if first != second {
            mismatched.push(cmd[0].clone());
        }
    }

    // `serve` writes its manifest before listening.
    let serve_manifest = ws.join("m/serve.json");
    let mut serve_bytes = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_file(&serve_manifest);
        let mut child = Command::new(BIN)
            .arg("--workspace")
            .arg(ws)
            .args(["--seed", "11", "--manifest", serve_manifest.to_str().unwrap(), "serve", "--bind", "127.0.0.1:0"])
            .stderr(std::process::Stdio::null())
            .spawn()
            .unwrap();
        let deadline = Instant::now() + Duration::from_secs(30);
        while !serve_manifest.exists() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(50));
        }
        std::thread::sleep(Duration::from_millis(200));
        let _ = child.kill();
        let _ = child.wait();
        serve_bytes.push(fs::read(&serve_manifest).unwrap_or_default());
    }
    if serve_bytes[0].is_empty() || serve_bytes[0] != serve_bytes[1] {
        mismatched.push("serve".into());
    }
    let total = commands.len() + 1;
    Outcome {
        id: 10,
        name: "determinism",
        pass: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            format!("{total} command runs reproduced byte-identical manifests")
        } else {
            format!("manifests differ for: {}", mismatched.join(", "))
        },
    }
}

#[test]
fn acceptance() {
    let kept = std::env::var_os("POSEDIR_ACCEPTANCE_WORKSPACE").map(PathBuf::from);
    let scratch = tempfile::tempdir().unwrap();
    let ws = kept.unwrap_or_else(|| scratch.path().to_path_buf());
    let trained = pipeline(&ws);
    // Defaults the pipeline relies on.
    assert_eq!(TrainConfig::default().batch_size.to_string(), TRAIN_BATCH);

    let outcomes = vec![
        criterion_1(&trained),
        criterion_2(&trained),
        criterion_3(&trained),
        criterion_4(&trained),
        criterion_5(&trained),
        criterion_6(&trained),
        criterion_7(&trained),
        criterion_8(&trained),
        criterion_9(&trained),
        criterion_10(),
    ];
    // Bypasses the harness's capture so the table shows without --nocapture.
    let mut out = std::io::stdout().lock();
    for o in &outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        writeln!(out, "criterion {:>2} {:<20} {}  {}", o.id, o.name, status, o.detail).unwrap();
    }
    drop(out);
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
