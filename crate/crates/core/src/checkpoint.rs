//! Versioned binary container shared by every persisted model.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `LDIR` |
//! | 4 | `u32` format version, currently 1 |
//! | 8 | `u64` header length `H` |
//! | `H` | UTF-8 JSON header |
//! | ... | tensor data, `f64` little-endian, in header order |
//! | 32 | SHA-256 of everything above |
//!
//! The header is `{"kind": str, "meta": object, "tensors": [{"name", "shape"}]}`.
//! Tensors are row-major; a tensor's element count is the product of its shape.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{FrozenEmbedder, PoseRegressor};
use crate::nn::{Conv3, Dense, Mlp, Pca};
use crate::shape3d::ShapeModel;
use crate::toygen::{Calibration, Renderer, SynthesisParams, ToyGenerator};

pub const MAGIC: &[u8; 4] = b"LDIR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), meta: serde_json::Map::new(), tensors: BTreeMap::new() }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.meta.insert(key.to_string(), serde_json::to_value(value).expect("serializable meta"));
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| bad(format!("{} checkpoint lacks meta field `{key}`", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| bad(format!("meta field `{key}`: {e}")))
    }

    pub fn put(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor `{name}` shape does not match data");
        self.tensors.insert(name.to_string(), Tensor { shape: shape.to_vec(), data: data.to_vec() });
    }

    pub fn put_vec(&mut self, name: &str, data: &[f64]) {
        self.put(name, &[data.len()], data);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| bad(format!("{} checkpoint lacks tensor `{name}`", self.kind)))
    }

    /// Tensor data, checked to hold exactly `len` values.
    pub fn take(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        if t.data.len() != len {
            return Err(bad(format!("tensor `{name}` has {} values, expected {len}", t.data.len())));
        }
        Ok(t.data.clone())
    }

    pub fn take_array<const N: usize>(&self, name: &str) -> Result<[f64; N]> {
        let v = self.take(name, N)?;
        Ok(v.try_into().expect("length checked"))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: Value::Object(self.meta.clone()),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.tensors.values().map(|t| t.data.len()).sum::<usize>() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let Value::Object(meta) = header.meta else {
            return Err(bad("meta is not an object"));
        };
        let mut pos = 16 + hlen;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = body.get(pos..pos + 8 * n).ok_or_else(|| bad(format!("truncated tensor `{}`", entry.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 8 * n;
            tensors.insert(entry.name, Tensor { shape: entry.shape, data });
        }
        if pos != body.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Self { kind: header.kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Types stored in the container.
pub trait Persist: Sized {
    const KIND: &'static str;

    fn write(&self, ck: &mut Checkpoint);
    fn read(ck: &Checkpoint) -> Result<Self>;

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND);
        self.write(&mut ck);
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        Self::read(ck)
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Hex SHA-256 of a checkpoint's bytes; changes with any stored value.
pub fn digest<T: Persist>(value: &T) -> String {
    hex::encode(Sha256::digest(value.to_checkpoint().to_bytes()))
}

// Nested components are written under a name prefix so one checkpoint can hold several.

fn write_shape_model(m: &ShapeModel, ck: &mut Checkpoint, p: &str) {
    use crate::{EXP_DIM, ID_DIM, NUM_LANDMARKS};
    ck.set_meta(&format!("{p}seed"), m.seed);
    ck.put(&format!("{p}mean_shape"), &[NUM_LANDMARKS, 3], &m.mean_shape);
    ck.put(&format!("{p}identity_basis"), &[3 * NUM_LANDMARKS, ID_DIM], &m.identity_basis);
    ck.put(&format!("{p}expression_basis"), &[3 * NUM_LANDMARKS, EXP_DIM], &m.expression_basis);
}

fn read_shape_model(ck: &Checkpoint, p: &str) -> Result<ShapeModel> {
    use crate::{EXP_DIM, ID_DIM, NUM_LANDMARKS};
    let n = 3 * NUM_LANDMARKS;
    Ok(ShapeModel {
        mean_shape: ck.take(&format!("{p}mean_shape"), n)?,
        identity_basis: ck.take(&format!("{p}identity_basis"), n * ID_DIM)?,
        expression_basis: ck.take(&format!("{p}expression_basis"), n * EXP_DIM)?,
        seed: ck.meta(&format!("{p}seed"))?,
    })
}

impl Persist for ShapeModel {
    const KIND: &'static str = "shape_model";

    fn write(&self, ck: &mut Checkpoint) {
        ck.set_meta("landmarks", crate::NUM_LANDMARKS);
        ck.set_meta("identity_dim", crate::ID_DIM);
        ck.set_meta("expression_dim", crate::EXP_DIM);
        write_shape_model(self, ck, "");
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        read_shape_model(ck, "")
    }
}

fn write_renderer(r: &Renderer, ck: &mut Checkpoint, p: &str) {
    write_shape_model(&r.shape_model, ck, &format!("{p}shape."));
    ck.put_vec(&format!("{p}blob"), &[r.blob_sigma_px, r.blob_amplitude]);
    ck.put_vec(&format!("{p}oval"), &r.oval);
    ck.put_vec(&format!("{p}synthesis"), &r.synthesis.to_vec());
}

fn read_renderer(ck: &Checkpoint, p: &str) -> Result<Renderer> {
    let blob = ck.take(&format!("{p}blob"), 2)?;
    Ok(Renderer {
        shape_model: read_shape_model(ck, &format!("{p}shape."))?,
        blob_sigma_px: blob[0],
        blob_amplitude: blob[1],
        oval: ck.take_array(&format!("{p}oval"))?,
        synthesis: SynthesisParams::from_slice(&ck.take(&format!("{p}synthesis"), SynthesisParams::LEN)?)?,
    })
}

impl Persist for ToyGenerator {
    const KIND: &'static str = "generator";

    fn write(&self, ck: &mut Checkpoint) {
        use crate::{LATENT_DIM, Q_DIM, WPLUS_DIM};
        ck.set_meta("seed", self.seed);
        ck.set_meta("num_layers", crate::NUM_LAYERS);
        ck.set_meta("latent_dim", LATENT_DIM);
        ck.set_meta("q_dim", Q_DIM);
        let c = &self.calibration;
        ck.put_vec("calibration", &[c.theta_scale_deg, c.expression_scale, c.identity_scale, c.nuisance_scale]);
        ck.put("mapping_hidden", &[LATENT_DIM, LATENT_DIM], &self.mapping_hidden);
        ck.put("mapping_out", &[LATENT_DIM, LATENT_DIM], &self.mapping_out);
        ck.put("semantic_basis", &[Q_DIM, WPLUS_DIM], &self.semantic_basis);
        ck.put_vec("semantic_offset", &self.semantic_offset);
        write_renderer(&self.renderer, ck, "renderer.");
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        use crate::{LATENT_DIM, Q_DIM, WPLUS_DIM};
        let [theta_scale_deg, expression_scale, identity_scale, nuisance_scale] = ck.take_array("calibration")?;
        Ok(Self {
            seed: ck.meta("seed")?,
            mapping_hidden: ck.take("mapping_hidden", LATENT_DIM * LATENT_DIM)?,
            mapping_out: ck.take("mapping_out", LATENT_DIM * LATENT_DIM)?,
            semantic_basis: ck.take("semantic_basis", Q_DIM * WPLUS_DIM)?,
            semantic_offset: ck.take("semantic_offset", Q_DIM)?,
            calibration: Calibration { theta_scale_deg, expression_scale, identity_scale, nuisance_scale },
            renderer: read_renderer(ck, "renderer.")?,
        })
    }
}

pub(crate) fn write_mlp(m: &Mlp, ck: &mut Checkpoint, p: &str) {
    ck.set_meta(&format!("{p}layers"), m.layers.len());
    for (i, l) in m.layers.iter().enumerate() {
        ck.put(&format!("{p}{i}.weight"), &[l.outputs, l.inputs], &l.weight);
        ck.put_vec(&format!("{p}{i}.bias"), &l.bias);
    }
}

pub(crate) fn read_mlp(ck: &Checkpoint, p: &str) -> Result<Mlp> {
    let n: usize = ck.meta(&format!("{p}layers"))?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let w = ck.tensor(&format!("{p}{i}.weight"))?;
        if w.shape.len() != 2 {
            return Err(bad(format!("layer {i} weight is not a matrix")));
        }
        let (outputs, inputs) = (w.shape[0], w.shape[1]);
        if i > 0 && layers.last().is_some_and(|l: &Dense| l.outputs != inputs) {
            return Err(bad(format!("layer {i} input width does not match previous layer")));
        }
        layers.push(Dense { inputs, outputs, weight: w.data.clone(), bias: ck.take(&format!("{p}{i}.bias"), outputs)? });
    }
    Ok(Mlp { layers })
}

pub(crate) fn write_conv(c: &Conv3, ck: &mut Checkpoint, p: &str) {
    ck.put(&format!("{p}weight"), &[c.outputs, c.inputs, 3, 3], &c.weight);
    ck.put_vec(&format!("{p}bias"), &c.bias);
}

pub(crate) fn read_conv(ck: &Checkpoint, p: &str) -> Result<Conv3> {
    let w = ck.tensor(&format!("{p}weight"))?;
    if w.shape.len() != 4 || w.shape[2..] != [3, 3] {
        return Err(bad(format!("`{p}weight` is not a 3x3 kernel stack")));
    }
    let (outputs, inputs) = (w.shape[0], w.shape[1]);
    Ok(Conv3 { inputs, outputs, weight: w.data.clone(), bias: ck.take(&format!("{p}bias"), outputs)? })
}

pub(crate) fn write_regressor(r: &PoseRegressor, ck: &mut Checkpoint, p: &str) {
    ck.set_meta(&format!("{p}fit_iterations"), r.fit_iterations);
    ck.put_vec(&format!("{p}pca.mean"), &r.pca.mean);
    ck.put(&format!("{p}pca.projection"), &[r.pca.components, r.pca.dim], &r.pca.projection);
    write_mlp(&r.mlp, ck, &format!("{p}mlp."));
    ck.put_vec(&format!("{p}target_mean"), &r.target_mean);
    ck.put_vec(&format!("{p}target_std"), &r.target_std);
    write_renderer(&r.renderer, ck, &format!("{p}renderer."));
}

pub(crate) fn read_regressor(ck: &Checkpoint, p: &str) -> Result<PoseRegressor> {
    let proj = ck.tensor(&format!("{p}pca.projection"))?;
    if proj.shape.len() != 2 {
        return Err(bad("pca projection is not a matrix"));
    }
    let (components, dim) = (proj.shape[0], proj.shape[1]);
    let pca = Pca { dim, mean: ck.take(&format!("{p}pca.mean"), dim)?, projection: proj.data.clone(), components };
    let n = crate::toygen::RenderParams::LEN;
    Ok(PoseRegressor {
        pca,
        mlp: read_mlp(ck, &format!("{p}mlp."))?,
        target_mean: ck.take(&format!("{p}target_mean"), n)?,
        target_std: ck.take(&format!("{p}target_std"), n)?,
        renderer: read_renderer(ck, &format!("{p}renderer."))?,
        fit_iterations: ck.meta(&format!("{p}fit_iterations"))?,
    })
}

impl Persist for PoseRegressor {
    const KIND: &'static str = "regressor";

    fn write(&self, ck: &mut Checkpoint) {
        write_regressor(self, ck, "");
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        read_regressor(ck, "")
    }
}

impl Persist for FrozenEmbedder {
    const KIND: &'static str = "embedder";

    fn write(&self, ck: &mut Checkpoint) {
        ck.set_meta("seed", self.seed);
        for (i, c) in self.convs.iter().enumerate() {
            write_conv(c, ck, &format!("conv{i}."));
        }
        ck.put("head", &[crate::estimator::EMBED_DIM, self.head.len() / crate::estimator::EMBED_DIM], &self.head);
        ck.put_vec("center", &self.center);
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        let convs = [read_conv(ck, "conv0.")?, read_conv(ck, "conv1.")?, read_conv(ck, "conv2.")?];
        let head = ck.tensor("head")?.data.clone();
        Ok(Self { convs, head, center: ck.take("center", crate::estimator::EMBED_DIM)?, seed: ck.meta("seed")? })
    }
}

impl Persist for crate::toygen::LatentCode {
    const KIND: &'static str = "latent";

    fn write(&self, ck: &mut Checkpoint) {
        use crate::toygen::LatentKind;
        let layers = if self.kind == LatentKind::WPlus { crate::NUM_LAYERS } else { 1 };
        ck.set_meta("latent_kind", self.kind);
        ck.put("w", &[layers, self.data.len() / layers], &self.data);
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.meta("latent_kind")?;
        Self::new(kind, ck.tensor("w")?.data.clone())
    }
}
