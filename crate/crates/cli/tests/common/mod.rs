#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dendrite_core::nn::{load_checkpoint, save_checkpoint};
use dendrite_core::ParamStore;

/// Small enough that a full train runs in seconds.
pub const TINY: &str = "\
# tiny end-to-end setup
image_size = 32
cores_min = 1
cores_max = 3
min_core_separation = 10
arm_length_min = 3
arm_length_max = 5
crop_half_size = 6
base_channels = 4
groups = 2
epochs1 = 2
epochs2 = 2
epochs_hsr = 2
patch_size = 16
hsr_channels = 4,4,4
radius_a = 2
radius_b = 4
radius_c = 8
crop_sizes = none,6
fill_modes = 0,gaussian
";

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dendrite")
}

pub fn dendrite(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = dendrite(args);
    assert!(
        out.status.success(),
        "dendrite {args:?} failed: {}",
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

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, text).unwrap();
    p
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Generates a tiny dataset and trains on it; returns (config path, data dir, models dir).
pub fn tiny_run(root: &Path, count: usize) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_config(root, TINY);
    let data = root.join("data");
    let models = root.join("models");
    let n = count.to_string();
    ok(&["synth", "--config", s(&cfg), "--count", &n, "--seed", "3", "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&models), "--seed", "3"]);
    (cfg, data, models)
}

/// Copies the models in `from` to `to`, replacing the named detectors' output layer with a
/// constant, so their heatmaps are `value` everywhere.
pub fn constant_heads(from: &Path, to: &Path, heads: &[(&str, f64)]) {
    fs::create_dir_all(to).unwrap();
    for f in ["d1.ckpt", "d2.ckpt", "hsr.ckpt"] {
        fs::copy(from.join(f), to.join(f)).unwrap();
    }
    for &(stage, value) in heads {
        let path = to.join(format!("{stage}.ckpt"));
        let (mut p, meta) = load_checkpoint::<f64>(&path).unwrap();
        p.get_mut("head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.get_mut("head.b").unwrap().data_mut().iter_mut().for_each(|v| *v = value);
        save_checkpoint(&p, &meta, &path).unwrap();
    }
}

/// Parameter values equal name by name (gradients ignored).
pub fn same_values(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().all(|(name, t)| b.get(name).is_some_and(|u| u.shape() == t.shape() && u.data() == t.data()))
}
