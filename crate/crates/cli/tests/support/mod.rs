#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsefocus"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sparsefocus")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        code(&out),
        0,
        "sparsefocus {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

/// A one-level, few-channel model trained for `epochs` on small batches.
pub fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let p = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "epochs": epochs,
        "batch_size": 2,
        "model": {
            "levels": 1,
            "blocks_per_level": 1,
            "base_channels": 2,
            "kernel_sizes": [3, 3],
            "dilation_schedule": [1]
        }
    });
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

/// Small dataset of 32×32 phantoms.
pub fn small_dataset(dir: &Path, seed: u64) -> PathBuf {
    let d = dir.join("data");
    ok(&[
        "phantom", "--out", s(&d), "--train", "4", "--val", "2", "--test", "3", "--size", "32",
        "--seed", &seed.to_string(),
    ]);
    d
}
