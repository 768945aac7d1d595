//! Per-command record of inputs and outputs.
//!
//! Manifests hold no timestamps and list paths relative to the workspace, so
//! rerunning a command with the same flags and seed rewrites the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::workspace::{file_sha256, Workspace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub args: BTreeMap<String, String>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Files whose content includes wall-clock time; listed, not hashed.
    pub logs: Vec<String>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self { command: command.to_string(), seed, ..Self::default() }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, ws: &Workspace, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord { path: ws.display(path), sha256: file_sha256(path)? });
        Ok(())
    }

    pub fn output(&mut self, ws: &Workspace, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord { path: ws.display(path), sha256: file_sha256(path)? });
        Ok(())
    }

    pub fn log(&mut self, ws: &Workspace, path: &Path) {
        self.logs.push(ws.display(path));
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_string(), serde_json::to_value(value).expect("summary value serializes"));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }

    /// Writes to `manifests/<command>.json` unless `path` is given.
    pub fn write(&self, ws: &Workspace, path: Option<&Path>) -> Result<std::path::PathBuf> {
        let target = match path {
            Some(p) => p.to_path_buf(),
            None => ws.ensure_dir("manifests")?.join(format!("{}.json", self.command)),
        };
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&target, self.to_bytes())?;
        Ok(target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_relative_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let f = ws.path("a/b.bin");
        fs::create_dir_all(f.parent().unwrap()).unwrap();
        fs::write(&f, b"abc").unwrap();
        let mut m = Manifest::new("demo", 5);
        m.arg("z", 1).arg("a", "x");
        m.output(&ws, &f).unwrap();
        m.log(&ws, &ws.path("logs/run.jsonl"));
        m.summary("loss", 0.5);
        assert_eq!(m.outputs[0].path, "a/b.bin");
        assert_eq!(m.outputs[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(m.logs, ["logs/run.jsonl"]);
        assert_eq!(m.args.keys().collect::<Vec<_>>(), ["a", "z"]);
        let written = m.write(&ws, None).unwrap();
        assert_eq!(written, ws.path("manifests/demo.json"));
        let back: Manifest = serde_json::from_slice(&fs::read(written).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.to_bytes(), back.to_bytes());
    }

    #[test]
    fn missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        assert!(Manifest::new("x", 0).input(&ws, &ws.path("absent")).is_err());
    }
}
