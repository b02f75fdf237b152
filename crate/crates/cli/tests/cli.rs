use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn disent(root: &Path, args: &[&str]) -> Output {
    let config = smoke_config();
    Command::new(env!("CARGO_BIN_EXE_disent"))
        .env("DISENT_OUTPUT_ROOT", root)
        .arg("--config")
        .arg(&config)
        .args(args)
        .output()
        .expect("spawn disent")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = disent(root, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn hash(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    format!("{:x}", Sha256::digest(bytes))
}

fn run_dir(root: &Path) -> PathBuf {
    root.join("runs/smoke")
}

#[test]
fn generate_twice_gives_identical_corpora() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["generate"]);
    let dir = run_dir(root.path()).join("corpus");
    let first = (hash(&dir.join("base.bin")), hash(&dir.join("target.bin")));
    ok(root.path(), &["generate"]);
    assert_eq!(first, (hash(&dir.join("base.bin")), hash(&dir.join("target.bin"))));
}

#[test]
fn train_and_eval_are_byte_reproducible() {
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut digests = Vec::new();
    for root in &roots {
        ok(root.path(), &["generate"]);
        ok(root.path(), &["train", "--stage", "2"]);
        ok(root.path(), &["train", "--stage", "3"]);
        ok(root.path(), &["eval", "--model", "stage3"]);
        let d = run_dir(root.path());
        digests.push(
            [
                "corpus/target.bin",
                "stage2/checkpoint.bin",
                "stage2/log.csv",
                "stage3/checkpoint.bin",
                "stage3/log.csv",
                "eval/stage3/result.csv",
                "eval/stage3/result.json",
                "eval/stage3/leakage.json",
            ]
            .map(|f| hash(&d.join(f))),
        );
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn stage3_without_stage2_checkpoint_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["generate"]);
    let out = disent(root.path(), &["train", "--stage", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error kind=config msg="), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    let out = disent(root.path(), &["--set", "stage3.gamma_q=1", "generate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_corpus_is_an_io_error() {
    let root = tempfile::tempdir().unwrap();
    let out = disent(root.path(), &["train", "--stage", "2"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=io"));
}

#[test]
fn inputs_are_not_mutated() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["generate"]);
    ok(root.path(), &["train", "--stage", "2"]);
    let d = run_dir(root.path());
    let before = (hash(&d.join("corpus/target.bin")), hash(&d.join("stage2/checkpoint.bin")));
    ok(root.path(), &["train", "--stage", "l2"]);
    ok(root.path(), &["export", "--model", "l2"]);
    assert_eq!(before, (hash(&d.join("corpus/target.bin")), hash(&d.join("stage2/checkpoint.bin"))));
}

#[test]
fn every_output_dir_has_the_resolved_config() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["--set", "stage2.epochs=1", "generate"]);
    ok(root.path(), &["--set", "stage2.epochs=1", "train", "--stage", "2"]);
    let d = run_dir(root.path());
    for sub in [".", "corpus", "stage2"] {
        let text = std::fs::read_to_string(d.join(sub).join("config.resolved.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["stage2"]["epochs"], 1);
        assert_eq!(v["generation"]["target_seed"], 2);
    }
}

#[test]
fn gradcheck_passes() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(root.path(), &["gradcheck"]);
    assert_eq!(out.lines().filter(|l| l.ends_with(" ok")).count(), 3, "{out}");
}

#[test]
fn smoke_pipeline_finishes_quickly() {
    let root = tempfile::tempdir().unwrap();
    let t = Instant::now();
    ok(root.path(), &["generate"]);
    for stage in ["2", "3", "l2", "ss", "ssft"] {
        ok(root.path(), &["train", "--stage", stage]);
    }
    for model in ["stage2", "stage3", "l2", "ss", "ssft"] {
        ok(root.path(), &["eval", "--model", model]);
    }
    ok(root.path(), &["export"]);
    ok(root.path(), &["render", "--step", "45"]);
    let out = ok(root.path(), &["ablate"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("model=")).count(), 5);
    assert!(t.elapsed() < Duration::from_secs(300), "{:?}", t.elapsed());
    let d = run_dir(root.path());
    assert!(d.join("ablation/report.csv").exists());
    assert_eq!(std::fs::read_dir(d.join("render")).unwrap().count(), 5 + 1);
}
