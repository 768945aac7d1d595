//! Command-line behavior that needs no trained models.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use posedir_cli::manifest::Manifest;

const BIN: &str = env!("CARGO_BIN_EXE_posedir");

fn run(ws: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--workspace").arg(ws).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn init_is_reproducible_and_records_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    assert!(run(ws, &["--seed", "3", "init"]).status.success());
    let first = fs::read(ws.join("manifests/init.json")).unwrap();
    let gen_bytes = fs::read(ws.join("generator.ldir")).unwrap();
    assert!(run(ws, &["--seed", "3", "init"]).status.success());
    assert_eq!(fs::read(ws.join("manifests/init.json")).unwrap(), first);
    assert_eq!(fs::read(ws.join("generator.ldir")).unwrap(), gen_bytes);

    let m: Manifest = serde_json::from_slice(&first).unwrap();
    assert_eq!(m.command, "init");
    assert_eq!(m.seed, 3);
    let paths: Vec<&str> = m.outputs.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(paths, ["shape_model.ldir", "generator.ldir", "embedder.ldir"]);
    assert!(m.outputs.iter().all(|f| f.sha256.len() == 64));

    assert!(run(ws, &["--seed", "4", "init"]).status.success());
    assert_ne!(fs::read(ws.join("generator.ldir")).unwrap(), gen_bytes);
}

#[test]
fn missing_artifacts_name_the_command_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    let o = run(ws, &["calibrate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("posedir init"), "{}", stderr(&o));

    assert!(run(ws, &["init"]).status.success());
    let o = run(ws, &["calibrate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("posedir train-regressor"), "{}", stderr(&o));

    let o = run(ws, &["build-corpus", "--n", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(ws, &["train-encoder", "--corpus", "absent"]);
    assert!(stderr(&o).contains("build-corpus --name absent"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["analyze"],
        vec!["analyze", "--linearity", "--disentanglement"],
        vec!["reenact", "--source", "a", "--target", "b", "--self", "--cross", "--out", "c"],
        vec!["train-directions", "--scheme", "paired"],
        vec!["eval", "--mode", "both"],
        vec!["frobnicate"],
    ] {
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn corpus_build_writes_index_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    assert!(run(ws, &["init"]).status.success());
    assert!(run(ws, &["--seed", "9", "build-corpus", "--n", "3", "--name", "tiny"]).status.success());
    let index: serde_json::Value = serde_json::from_slice(&fs::read(ws.join("corpora/tiny/index.json")).unwrap()).unwrap();
    assert_eq!(index["seed"], 9);
    assert_eq!(index["entries"].as_array().unwrap().len(), 3);
    for i in 0..3 {
        assert!(ws.join(format!("corpora/tiny/{i:05}.png")).is_file());
    }
    let m: Manifest = serde_json::from_slice(&fs::read(ws.join("manifests/build-corpus.json")).unwrap()).unwrap();
    assert_eq!(m.outputs.len(), 5);
}

#[test]
fn explicit_manifest_path_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    let target = ws.join("elsewhere/init-manifest.json");
    assert!(run(ws, &["--manifest", target.to_str().unwrap(), "init"]).status.success());
    assert!(target.is_file());
    assert!(!ws.join("manifests/init.json").exists());
}
