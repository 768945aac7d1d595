//! One function per subcommand. Each returns the manifest it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;

use posedir_core::checkpoint::{digest, Persist};
use posedir_core::directions::{estimate_p_stats, max_principal_angle_deg, pose_of, DirectionMatrix, PoseStats};
use posedir_core::estimator::{train_regressor, FrozenEmbedder, PoseRegressor, RegressorConfig};
use posedir_core::evaluation::{csim, disentanglement_report, linearity_analysis, run_eval, EvalMode, EvalPair};
use posedir_core::image::FaceImage;
use posedir_core::inversion::{build_real_corpus, pivotal_tune, train_encoder, Encoder, EncoderConfig, RealAnalogCorpus, TuneConfig};
use posedir_core::shape3d::ShapeModel;
use posedir_core::toygen::{LatentCode, ToyGenerator};
use posedir_core::training::{
    finetune_paired, paired_pool, real_pool, synthetic_pool, train_directions, Frozen, JsonlLog, Scheme, TrainConfig,
    TrainingPools,
};
use posedir_core::attribute_names;

use crate::cli::*;
use crate::manifest::Manifest;
use crate::workspace::*;

/// Seed offsets keeping each command's draws apart.
const POOL_STREAM: u64 = 0x9001;
const PAIRED_STREAM: u64 = 0x9002;
const EVAL_STREAM: u64 = 0x9003;
/// The embedder's seed relative to the generator's.
const EMBEDDER_SEED_OFFSET: u64 = 1;

pub fn run(cli: &Cli) -> Result<Manifest> {
    let ws = Workspace::new(&cli.workspace);
    let seed = cli.seed;
    let manifest = match &cli.command {
        Command::Init => init(&ws, seed)?,
        Command::TrainRegressor(a) => train_regressor_cmd(&ws, seed, a)?,
        Command::Calibrate(a) => calibrate(&ws, seed, a)?,
        Command::TrainDirections(a) => train_directions_cmd(&ws, seed, a)?,
        Command::FinetunePaired(a) => finetune_cmd(&ws, seed, a)?,
        Command::BuildCorpus(a) => build_corpus(&ws, seed, a)?,
        Command::TrainEncoder(a) => train_encoder_cmd(&ws, seed, a)?,
        Command::Invert(a) => invert(&ws, seed, a)?,
        Command::Reenact(a) => reenact(&ws, seed, a)?,
        Command::Edit(a) => edit(&ws, seed, a)?,
        Command::Frontalize(a) => frontalize(&ws, seed, a)?,
        Command::Eval(a) => eval(&ws, seed, a)?,
        Command::Analyze(a) => analyze(&ws, seed, a)?,
        Command::Serve(a) => {
            let m = serve_manifest(&ws, seed, a)?;
            m.write(&ws, cli.manifest.as_deref())?;
            crate::server::serve_blocking(&ws, a)?;
            return Ok(m);
        }
    };
    manifest.write(&ws, cli.manifest.as_deref())?;
    Ok(manifest)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    write_file(path, &v)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_image(path: &Path) -> Result<FaceImage> {
    let bytes = fs::read(path).with_context(|| format!("reading image {}", path.display()))?;
    Ok(FaceImage::from_png_bytes(&bytes)?)
}

pub fn attribute_index(name: &str) -> Result<usize> {
    let names = attribute_names();
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| anyhow!("unknown attribute `{name}`; expected one of {}", names.join(", ")))
}

/// Frozen models every downstream command needs.
pub struct Models {
    pub gen: ToyGenerator,
    pub reg: PoseRegressor,
    pub emb: FrozenEmbedder,
}

impl Models {
    pub fn load(ws: &Workspace, m: &mut Manifest) -> Result<Self> {
        let gen = load_input(ws, m, &GENERATOR)?;
        let reg = load_input(ws, m, &REGRESSOR)?;
        let emb = load_input(ws, m, &EMBEDDER)?;
        Ok(Self { gen, reg, emb })
    }

    pub fn frozen(&self) -> Frozen<'_> {
        Frozen { gen: &self.gen, reg: &self.reg, emb: &self.emb }
    }
}

fn load_input<T: Persist>(ws: &Workspace, m: &mut Manifest, a: &Artifact) -> Result<T> {
    let v = ws.load(a)?;
    m.input(ws, &ws.artifact_path(a))?;
    Ok(v)
}

pub fn load_directions(ws: &Workspace, m: &mut Manifest, name: &str) -> Result<DirectionMatrix> {
    let p = ws.require_directions(name)?;
    m.input(ws, &p)?;
    Ok(DirectionMatrix::load(&p)?)
}

fn save_output<T: Persist>(ws: &Workspace, m: &mut Manifest, value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    value.save(path)?;
    m.output(ws, path)
}

fn init(ws: &Workspace, seed: u64) -> Result<Manifest> {
    let mut m = Manifest::new("init", seed);
    fs::create_dir_all(&ws.root)?;
    let shape = ShapeModel::new(seed);
    let gen = ToyGenerator::with_shape_model(seed, shape.clone());
    let emb = FrozenEmbedder::new(seed + EMBEDDER_SEED_OFFSET, &gen);
    save_output(ws, &mut m, &shape, &ws.artifact_path(&SHAPE_MODEL))?;
    save_output(ws, &mut m, &gen, &ws.artifact_path(&GENERATOR))?;
    save_output(ws, &mut m, &emb, &ws.artifact_path(&EMBEDDER))?;
    m.summary("generator_digest", digest(&gen));
    Ok(m)
}

fn train_regressor_cmd(ws: &Workspace, seed: u64, a: &TrainRegressorArgs) -> Result<Manifest> {
    let mut m = Manifest::new("train-regressor", seed);
    let gen: ToyGenerator = load_input(ws, &mut m, &GENERATOR)?;
    let mut config: RegressorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RegressorConfig::default(),
    };
    config.seed = seed;
    if let Some(n) = a.n_train {
        config.n_train = n;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    m.arg("config", serde_json::to_string(&config)?);
    let (reg, report) = train_regressor(&gen, &config)?;
    save_output(ws, &mut m, &reg, &ws.artifact_path(&REGRESSOR))?;
    let report_path = ws.path("reports/regressor.json");
    write_json(&report_path, &report)?;
    m.output(ws, &report_path)?;
    m.summary("worst_rmse_fraction", report.worst);
    Ok(m)
}

fn calibrate(ws: &Workspace, seed: u64, a: &CalibrateArgs) -> Result<Manifest> {
    let mut m = Manifest::new("calibrate", seed);
    m.arg("samples", a.samples);
    let gen: ToyGenerator = load_input(ws, &mut m, &GENERATOR)?;
    let reg: PoseRegressor = load_input(ws, &mut m, &REGRESSOR)?;
    let stats = estimate_p_stats(&gen, &reg, a.samples, seed)?;
    save_output(ws, &mut m, &stats, &ws.artifact_path(&STATS))?;
    let json = ws.path("reports/stats.json");
    write_json(&json, &stats)?;
    m.output(ws, &json)?;
    Ok(m)
}

fn train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run_training(
    ws: &Workspace,
    m: &mut Manifest,
    models: &Models,
    pools: &TrainingPools,
    init: DirectionMatrix,
    config: &TrainConfig,
    name: &str,
) -> Result<DirectionMatrix> {
    let log_path = ws.ensure_dir("logs")?.join(format!("{name}.jsonl"));
    let mut log = JsonlLog::new(std::io::BufWriter::new(fs::File::create(&log_path)?));
    let (a, records) = if config.scheme == Scheme::Paired {
        finetune_paired(models.frozen(), init, &pools.paired, config, |r| log.append(r))?
    } else {
        train_directions(models.frozen(), pools, init, config, |r| log.append(r))?
    };
    drop(log);
    m.log(ws, &log_path);
    save_output(ws, m, &a, &ws.directions_path(name))?;
    if let Some(last) = records.last() {
        m.summary("final_loss", &last.loss);
    }
    let oracle = DirectionMatrix::oracle(&models.gen, a.stats.clone());
    m.summary("max_angle_to_closed_form_deg", max_principal_angle_deg(&a, &oracle));
    Ok(a)
}

fn train_directions_cmd(ws: &Workspace, seed: u64, a: &TrainDirectionsArgs) -> Result<Manifest> {
    let mut m = Manifest::new("train-directions", seed);
    let scheme = match a.scheme {
        SchemeArg::Synthetic => Scheme::Synthetic,
        SchemeArg::Mixed => Scheme::Mixed,
    };
    let mut config = train_config(&a.config)?;
    config.scheme = scheme;
    config.seed = seed;
    if let Some(v) = a.iterations {
        config.iterations = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.init_std {
        config.init_std = v;
    }
    config.validate()?;
    let name = a.name.clone().unwrap_or_else(|| serde_json::to_value(scheme).unwrap().as_str().unwrap().to_string());
    m.arg("name", &name).arg("pool_size", a.pool_size).arg("config", serde_json::to_string(&config)?);

    let models = Models::load(ws, &mut m)?;
    let stats: PoseStats = load_input(ws, &mut m, &STATS)?;
    let mut pools = TrainingPools { synthetic: synthetic_pool(models.frozen(), a.pool_size, seed ^ POOL_STREAM), ..Default::default() };
    if scheme == Scheme::Mixed {
        m.arg("corpus", &a.corpus);
        let enc: Encoder = load_input(ws, &mut m, &ENCODER)?;
        let dir = ws.require_corpus(&a.corpus)?;
        m.input(ws, &dir.join(posedir_core::inversion::CORPUS_INDEX))?;
        let corpus = RealAnalogCorpus::load(&dir)?;
        pools.real = real_pool(models.frozen(), &enc, &corpus.images);
    }
    let init = DirectionMatrix::random(stats, config.init_std, seed);
    run_training(ws, &mut m, &models, &pools, init, &config, &name)?;
    Ok(m)
}

fn finetune_cmd(ws: &Workspace, seed: u64, a: &FinetuneArgs) -> Result<Manifest> {
    let mut m = Manifest::new("finetune-paired", seed);
    let mut config = train_config(&a.config)?;
    config.scheme = Scheme::Paired;
    config.seed = seed;
    if let Some(v) = a.iterations {
        config.iterations = v;
    } else if a.config.is_none() {
        config.iterations = 500;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    config.validate()?;
    m.arg("from", &a.from).arg("name", &a.name).arg("pairs", a.pairs).arg("config", serde_json::to_string(&config)?);
    let models = Models::load(ws, &mut m)?;
    let start = load_directions(ws, &mut m, &a.from)?;
    let pools = TrainingPools { paired: paired_pool(models.frozen(), a.pairs, seed ^ PAIRED_STREAM), ..Default::default() };
    run_training(ws, &mut m, &models, &pools, start, &config, &a.name)?;
    Ok(m)
}

fn build_corpus(ws: &Workspace, seed: u64, a: &BuildCorpusArgs) -> Result<Manifest> {
    let mut m = Manifest::new("build-corpus", seed);
    m.arg("n", a.n).arg("name", &a.name);
    let gen: ToyGenerator = load_input(ws, &mut m, &GENERATOR)?;
    let corpus = build_real_corpus(&gen, a.n, seed)?;
    let dir = ws.corpus_dir(&a.name);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    corpus.save(&dir)?;
    let index = corpus.index();
    m.output(ws, &dir.join(posedir_core::inversion::CORPUS_INDEX))?;
    for e in &index.entries {
        m.output(ws, &dir.join(&e.file))?;
    }
    m.output(ws, &dir.join(posedir_core::inversion::CORPUS_TRUTH))?;
    Ok(m)
}

fn train_encoder_cmd(ws: &Workspace, seed: u64, a: &TrainEncoderArgs) -> Result<Manifest> {
    let mut m = Manifest::new("train-encoder", seed);
    let gen: ToyGenerator = load_input(ws, &mut m, &GENERATOR)?;
    let dir = ws.require_corpus(&a.corpus)?;
    m.input(ws, &dir.join(posedir_core::inversion::CORPUS_INDEX))?;
    let corpus = RealAnalogCorpus::load(&dir)?;
    let mut config: EncoderConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EncoderConfig::default(),
    };
    config.core.seed = seed;
    m.arg("corpus", &a.corpus).arg("config", serde_json::to_string(&config)?);
    let (enc, report) = train_encoder(&gen, &corpus, &config)?;
    save_output(ws, &mut m, &enc, &ws.artifact_path(&ENCODER))?;
    let report_path = ws.path("reports/encoder.json");
    write_json(&report_path, &report)?;
    m.output(ws, &report_path)?;
    m.summary("holdout_l1", report.holdout_l1);
    Ok(m)
}

fn invert(ws: &Workspace, seed: u64, a: &InvertArgs) -> Result<Manifest> {
    let mut m = Manifest::new("invert", seed);
    let gen: ToyGenerator = load_input(ws, &mut m, &GENERATOR)?;
    let enc: Encoder = load_input(ws, &mut m, &ENCODER)?;
    m.input(ws, &a.image)?;
    let img = read_image(&a.image)?;
    let code = enc.invert(&img);
    save_output(ws, &mut m, &code, &a.out)?;
    if let Some(p) = &a.preview {
        write_file(p, &gen.generate(&code)?.to_png_bytes())?;
        m.output(ws, p)?;
    }
    Ok(m)
}

/// Everything a single-image edit needs.
struct EditContext {
    gen: ToyGenerator,
    reg: PoseRegressor,
    enc: Encoder,
    a: DirectionMatrix,
}

impl EditContext {
    fn load(ws: &Workspace, m: &mut Manifest, directions: &str) -> Result<Self> {
        Ok(Self {
            gen: load_input(ws, m, &GENERATOR)?,
            reg: load_input(ws, m, &REGRESSOR)?,
            enc: load_input(ws, m, &ENCODER)?,
            a: load_directions(ws, m, directions)?,
        })
    }

    /// Applies absolute targets to the image's estimated pose and renders.
    fn apply(&self, img: &FaceImage, targets: &[(usize, f64)]) -> Result<(LatentCode, FaceImage)> {
        let w = self.enc.invert(img);
        let p = pose_of(&self.reg.estimate(img));
        let dp = self.a.edit_delta(&p, targets)?;
        let w_e = self.a.shift(&w, &dp)?;
        let out = self.gen.generate(&w_e)?;
        Ok((w_e, out))
    }
}

fn write_edit_output(ws: &Workspace, m: &mut Manifest, reg: &PoseRegressor, img: &FaceImage, out: &Path) -> Result<()> {
    write_file(out, &img.to_png_bytes())?;
    m.output(ws, out)?;
    let est = reg.estimate(img);
    let names = attribute_names();
    let pose: serde_json::Map<String, serde_json::Value> =
        pose_of(&est).iter().enumerate().map(|(i, v)| (names[i].clone(), (*v).into())).collect();
    m.summary("estimated_pose", pose);
    Ok(())
}

fn edit(ws: &Workspace, seed: u64, a: &EditArgs) -> Result<Manifest> {
    let mut m = Manifest::new("edit", seed);
    m.arg("attr", &a.attr).arg("value", a.value).arg("directions", &a.directions);
    let index = attribute_index(&a.attr)?;
    let ctx = EditContext::load(ws, &mut m, &a.directions)?;
    m.input(ws, &a.image)?;
    let (_, out) = ctx.apply(&read_image(&a.image)?, &[(index, a.value)])?;
    write_edit_output(ws, &mut m, &ctx.reg, &out, &a.out)?;
    Ok(m)
}

fn frontalize(ws: &Workspace, seed: u64, a: &FrontalizeArgs) -> Result<Manifest> {
    let mut m = Manifest::new("frontalize", seed);
    m.arg("directions", &a.directions);
    let ctx = EditContext::load(ws, &mut m, &a.directions)?;
    m.input(ws, &a.image)?;
    let (_, out) = ctx.apply(&read_image(&a.image)?, &[(0, 0.0), (1, 0.0), (2, 0.0)])?;
    write_edit_output(ws, &mut m, &ctx.reg, &out, &a.out)?;
    Ok(m)
}

fn reenact(ws: &Workspace, seed: u64, a: &ReenactArgs) -> Result<Manifest> {
    let mut m = Manifest::new("reenact", seed);
    let mode = if a.self_reenactment { EvalMode::SelfReenactment } else { EvalMode::Cross };
    m.arg("mode", serde_json::to_value(mode)?.as_str().unwrap_or_default())
        .arg("directions", &a.directions)
        .arg("tune_steps", a.tune_steps);
    let ctx = EditContext::load(ws, &mut m, &a.directions)?;
    let emb: FrozenEmbedder = load_input(ws, &mut m, &EMBEDDER)?;
    m.input(ws, &a.source)?;
    m.input(ws, &a.target)?;
    let (src, tgt) = (read_image(&a.source)?, read_image(&a.target)?);
    let w_s = ctx.enc.invert(&src);
    let (p_s, p_t) = (pose_of(&ctx.reg.estimate(&src)), pose_of(&ctx.reg.estimate(&tgt)));
    let w_r = ctx.a.reenact_code(&w_s, &p_s, &p_t)?;
    let gen = if a.tune_steps > 0 {
        let config = TuneConfig { steps: a.tune_steps, ..TuneConfig::default() };
        let out = pivotal_tune(&ctx.gen, &emb, &src, &w_s, &config)?;
        m.summary("tune_loss_before", out.loss_before);
        m.summary("tune_loss_after", out.loss_after);
        out.generator
    } else {
        ctx.gen.clone()
    };
    let out = gen.generate(&w_r)?;
    let reference = if mode == EvalMode::SelfReenactment { &tgt } else { &src };
    m.summary("csim", csim(&emb, reference, &out));
    write_edit_output(ws, &mut m, &ctx.reg, &out, &a.out)?;
    Ok(m)
}

fn eval(ws: &Workspace, seed: u64, a: &EvalArgs) -> Result<Manifest> {
    let mut m = Manifest::new("eval", seed);
    let mode = match a.mode {
        ModeArg::SelfReenactment => EvalMode::SelfReenactment,
        ModeArg::Cross => EvalMode::Cross,
    };
    let mode_name = serde_json::to_value(mode)?.as_str().unwrap_or_default().to_string();
    m.arg("mode", &mode_name).arg("pairs", a.pairs).arg("directions", &a.directions);
    if a.pairs == 0 {
        bail!("eval needs at least one pair");
    }
    let models = Models::load(ws, &mut m)?;
    let dirs = load_directions(ws, &mut m, &a.directions)?;
    let gen = &models.gen;
    let pairs: Vec<EvalPair> = match (mode, &a.corpus) {
        (EvalMode::SelfReenactment, Some(_)) => bail!("corpus images have no same-identity frames; use --mode cross"),
        (EvalMode::SelfReenactment, None) => posedir_core::training::paired_codes(gen, a.pairs, seed ^ EVAL_STREAM)
            .into_iter()
            .map(|(s, t)| {
                Ok(EvalPair { source_image: gen.generate(&s)?, source_code: s, target_image: gen.generate(&t)? })
            })
            .collect::<Result<_>>()?,
        (EvalMode::Cross, None) => {
            let codes = gen.sample_wplus(2 * a.pairs, seed ^ EVAL_STREAM);
            codes
                .chunks(2)
                .map(|c| {
                    Ok(EvalPair {
                        source_image: gen.generate(&c[0])?,
                        source_code: c[0].clone(),
                        target_image: gen.generate(&c[1])?,
                    })
                })
                .collect::<Result<_>>()?
        }
        (EvalMode::Cross, Some(name)) => {
            m.arg("corpus", name);
            let enc: Encoder = load_input(ws, &mut m, &ENCODER)?;
            let dir = ws.require_corpus(name)?;
            m.input(ws, &dir.join(posedir_core::inversion::CORPUS_INDEX))?;
            let corpus = RealAnalogCorpus::load(&dir)?;
            if corpus.len() < 2 * a.pairs {
                bail!("corpus `{name}` has {} images; {} pairs need {}", corpus.len(), a.pairs, 2 * a.pairs);
            }
            corpus.images[..2 * a.pairs]
                .chunks(2)
                .map(|c| EvalPair { source_image: c[0].clone(), source_code: enc.invert(&c[0]), target_image: c[1].clone() })
                .collect()
        }
    };
    let report = run_eval(gen, &models.reg, &models.emb, &dirs, mode, &pairs)?;
    let out = a.out.clone().unwrap_or_else(|| ws.path(format!("reports/eval-{mode_name}")));
    write_json(&out.join("report.json"), &report)?;
    write_file(&out.join("report.txt"), report.to_text().as_bytes())?;
    write_file(&out.join("records.csv"), report.to_csv().as_bytes())?;
    for f in ["report.json", "report.txt", "records.csv"] {
        m.output(ws, &out.join(f))?;
    }
    m.summary("records", report.records.len());
    m.summary("mean_pose_l1_deg", report.mean_pose_l1_deg);
    m.summary("mean_csim", report.mean_csim);
    Ok(m)
}

fn analyze(ws: &Workspace, seed: u64, a: &AnalyzeArgs) -> Result<Manifest> {
    let mut m = Manifest::new("analyze", seed);
    m.arg("n", a.n).arg("directions", &a.directions);
    let gen: ToyGenerator = load_input(ws, &mut m, &GENERATOR)?;
    let reg: PoseRegressor = load_input(ws, &mut m, &REGRESSOR)?;
    let dirs = load_directions(ws, &mut m, &a.directions)?;
    let out = a.out.clone().unwrap_or_else(|| ws.path("reports"));
    if a.linearity {
        m.arg("analysis", "linearity");
        let report = linearity_analysis(&gen, &reg, &dirs, a.n, seed)?;
        write_json(&out.join("linearity.json"), &report)?;
        write_file(&out.join("linearity.csv"), report.to_csv().as_bytes())?;
        m.output(ws, &out.join("linearity.json"))?;
        m.output(ws, &out.join("linearity.csv"))?;
        for attr in &report.attributes {
            m.summary(&format!("correlation.{}", attr.attribute), attr.correlation);
        }
    } else {
        m.arg("analysis", "disentanglement").arg("attr", &a.attr);
        let index = attribute_index(&a.attr)?;
        let report = disentanglement_report(&gen, &reg, &dirs, index, a.n, seed)?;
        write_json(&out.join("disentanglement.json"), &report)?;
        write_file(&out.join("disentanglement.csv"), report.to_csv().as_bytes())?;
        m.output(ws, &out.join("disentanglement.json"))?;
        m.output(ws, &out.join("disentanglement.csv"))?;
        m.summary("worst_median_off_target", report.worst_off_target());
        m.summary("median_achieved_fraction", report.median_achieved_fraction);
    }
    Ok(m)
}

/// Manifest `serve` writes before it starts listening.
pub fn serve_manifest(ws: &Workspace, seed: u64, a: &ServeArgs) -> Result<Manifest> {
    let mut m = Manifest::new("serve", seed);
    m.arg("bind", &a.bind)
        .arg("directions", &a.directions)
        .arg("session_ttl_secs", a.session_ttl_secs)
        .arg("max_sessions", a.max_sessions)
        .arg("max_tuned", a.max_tuned);
    for art in [&GENERATOR, &REGRESSOR, &EMBEDDER, &ENCODER] {
        m.input(ws, &ws.require(art)?)?;
    }
    m.input(ws, &ws.require_directions(&a.directions)?)?;
    Ok(m)
}

/// Attribute names with their calibrated raw ranges.
pub fn attribute_table(stats: &PoseStats) -> Vec<(String, f64, f64)> {
    attribute_names().into_iter().enumerate().map(|(i, n)| (n, stats.low[i], stats.high[i])).collect()
}
