#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn talkhead(args: &[&str]) -> Output {
    talkhead_env(args, &[])
}

pub fn talkhead_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_talkhead"));
    cmd.args(args).env_remove("FACETALK_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = talkhead(args);
    assert!(
        out.status.success(),
        "talkhead {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `dir` keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Config for a small, fast model and short training run.
pub fn tiny_config(dir: &Path, steps: usize) -> PathBuf {
    let path = dir.join("tiny.json");
    let text = format!(
        r#"{{
  "model": {{"blocks": 2, "d_model": 32, "heads": 4, "d_attn": 32, "d_ff": 64}},
  "train": {{"steps": {steps}, "batch_size": 2, "clip_frames": 24}},
  "fit": {{"iters": 40, "samples": 500}},
  "template_fit": {{"steps": 60}},
  "grid": {{"resolution": [20, 20, 20]}}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

/// Synthetic dataset with point clouds and template views.
pub fn dataset(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen-synthetic",
        "--out",
        s(&data),
        "--records",
        "2",
        "--frames",
        "48",
        "--cloud-points",
        "600",
        "--template-frames",
        "2",
        "--seed",
        &seed.to_string(),
    ]);
    data
}
