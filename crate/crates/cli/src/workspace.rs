//! On-disk layout of a workspace and resolution of named artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use posedir_core::checkpoint::Persist;
use sha2::{Digest, Sha256};

/// Environment variable naming the workspace root.
pub const ROOT_ENV: &str = "POSEDIR_WORKSPACE";

#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

/// A named artifact with the command that produces it.
#[derive(Clone, Copy, Debug)]
pub struct Artifact {
    pub name: &'static str,
    pub file: &'static str,
    pub made_by: &'static str,
}

pub const GENERATOR: Artifact = Artifact { name: "generator", file: "generator.ldir", made_by: "init" };
pub const SHAPE_MODEL: Artifact = Artifact { name: "shape model", file: "shape_model.ldir", made_by: "init" };
pub const EMBEDDER: Artifact = Artifact { name: "embedder", file: "embedder.ldir", made_by: "init" };
pub const REGRESSOR: Artifact = Artifact { name: "regressor", file: "regressor.ldir", made_by: "train-regressor" };
pub const STATS: Artifact = Artifact { name: "pose stats", file: "stats.ldir", made_by: "calibrate" };
pub const ENCODER: Artifact = Artifact { name: "encoder", file: "encoder.ldir", made_by: "train-encoder" };

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// `rel` if `path` lies under the root, else `path` as given.
    pub fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    pub fn ensure_dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    pub fn artifact_path(&self, a: &Artifact) -> PathBuf {
        self.path(a.file)
    }

    /// Path of an existing artifact, or an error naming it.
    pub fn require(&self, a: &Artifact) -> Result<PathBuf> {
        let p = self.artifact_path(a);
        if !p.is_file() {
            bail!("missing {} checkpoint ({}); run `posedir {}` first", a.name, p.display(), a.made_by);
        }
        Ok(p)
    }

    pub fn load<T: Persist>(&self, a: &Artifact) -> Result<T> {
        let p = self.require(a)?;
        T::load(&p).with_context(|| format!("loading {} from {}", a.name, p.display()))
    }

    pub fn directions_path(&self, name: &str) -> PathBuf {
        self.path(format!("directions/{name}.ldir"))
    }

    pub fn require_directions(&self, name: &str) -> Result<PathBuf> {
        let p = self.directions_path(name);
        if !p.is_file() {
            bail!("missing direction matrix `{name}` ({}); run `posedir train-directions --name {name}` first", p.display());
        }
        Ok(p)
    }

    pub fn corpus_dir(&self, name: &str) -> PathBuf {
        self.path(format!("corpora/{name}"))
    }

    pub fn require_corpus(&self, name: &str) -> Result<PathBuf> {
        let p = self.corpus_dir(name);
        if !p.join(posedir_core::inversion::CORPUS_INDEX).is_file() {
            bail!("missing corpus `{name}` ({}); run `posedir build-corpus --name {name}` first", p.display());
        }
        Ok(p)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}
