mod common;

use std::fs;

use common::*;
use dendrite_cli::commands::{load_labeled, load_models};
use dendrite_cli::{RunConfig, EXIT_CHECK, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_TRAINING};
use dendrite_core::nn::load_checkpoint;
use dendrite_core::pipeline::{binarize_heatmap, extract_peaks, run_pipeline, train_cascade, Stages};

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "image_size = 32\nfrobnicate = 3\n");
    let out = dendrite(&["synth", "--config", s(&cfg), "--count", "5", "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));
    let out = dendrite(&["synth", "--set", "alpha=2", "--count", "5", "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), EXIT_CONFIG);
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dendrite(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&out), EXIT_IO);
}

#[test]
fn exploding_loss_exits_4_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}lr1 = 1e200\n"));
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--count", "5", "--out", s(&data)]);
    let out = dendrite(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&out), EXIT_TRAINING, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d1"));
}

#[test]
fn synth_is_deterministic_and_splits_six_two_two() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&["synth", "--count", "10", "--seed", "7", "--out", s(d)]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("train 6, val 2, test 2"));
    }
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("config.txt").exists());
}

#[test]
fn training_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, models) = tiny_run(dir.path(), 20);
    for f in ["d1.ckpt", "d2.ckpt", "hsr.ckpt", "d1_loss.csv", "d2_loss.csv", "hsr_loss.csv", "config.txt"] {
        assert!(models.join(f).exists(), "{f} missing");
    }
    assert!(!models.join("state").exists());
    assert_eq!(fs::read_to_string(models.join("d1_loss.csv")).unwrap().lines().count(), 3);

    // The command line and the library agree bit for bit.
    let rc = RunConfig::load(&cfg).unwrap();
    let mut rc = rc;
    rc.set("seed", "3").unwrap();
    let opts = rc.cascade().unwrap();
    let train: Vec<_> = load_labeled(&data, "train").unwrap().into_iter().map(|(_, s)| s).collect();
    let lib = train_cascade(&train, &opts).unwrap();
    let (d1, _) = load_checkpoint::<f64>(&models.join("d1.ckpt")).unwrap();
    let (d2, _) = load_checkpoint::<f64>(&models.join("d2.ckpt")).unwrap();
    let (hsr, _) = load_checkpoint::<f64>(&models.join("hsr.ckpt")).unwrap();
    assert!(same_values(&d1, &lib.d1.params));
    assert!(same_values(&d2, &lib.d2.params));
    assert!(same_values(&hsr, &lib.hsr.params));

    // Detection output matches the stage outputs computed in-process.
    let det = dir.path().join("det");
    ok(&["detect", "--config", s(&cfg), "--models", s(&models), "--data", s(&data), "--out", s(&det)]);
    let m = load_models(&models, &opts).unwrap();
    for (name, sample) in load_labeled(&data, "test").unwrap() {
        let so = run_pipeline(&sample.image, &m.d1, Some(&m.d2), Some(&m.hsr), &opts.pipeline, Stages::Full, None)
            .unwrap();
        let mut want = String::from("row,col,stage\n");
        for (p, stage) in so.tagged_points() {
            want.push_str(&format!("{},{},{stage}\n", p.row, p.col));
        }
        let got = fs::read_to_string(det.join(&name).join("pred.csv")).unwrap();
        assert_eq!(got, want, "{name}");
        let listed: Vec<_> = so.tagged_points().into_iter().map(|t| t.0).collect();
        assert_eq!(listed, so.merged_points);
        for f in ["h1.png", "h2.png", "h2_refined.png", "merged.png", "overlay.png", "i2.png"] {
            assert!(det.join(&name).join(f).exists());
        }
    }

    // Evaluation is repeatable and its pooled row is the sum of the per-image rows.
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--config", s(&cfg), "--models", s(&models), "--data", s(&data), "--out", s(e)]);
    }
    assert_eq!(tree(&e1), tree(&e2));
    let metrics = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    let pooled: Vec<usize> = metrics.lines().nth(1).unwrap().split(',').take(3).map(|v| v.parse().unwrap()).collect();
    let per = fs::read_to_string(e1.join("per_image.csv")).unwrap();
    let mut sums = [0usize; 3];
    for line in per.lines().skip(1) {
        for (k, v) in line.split(',').skip(1).enumerate() {
            sums[k] += v.parse::<usize>().unwrap();
        }
    }
    assert_eq!(pooled, sums.to_vec());

    // Architecture mismatch is a checkpoint error.
    let out = dendrite(&[
        "eval", "--config", s(&cfg), "--set", "base_channels=8", "--set", "groups=4", "--models", s(&models),
        "--data", s(&data), "--out", s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), EXIT_CHECKPOINT);

    // An empty split is a data error.
    let manifest = data.join("manifest.json");
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    json["test"] = serde_json::json!([]);
    fs::write(&manifest, json.to_string()).unwrap();
    let out = dendrite(&["eval", "--config", s(&cfg), "--models", s(&models), "--data", s(&data), "--out", s(&e1)]);
    assert_eq!(code(&out), EXIT_DATA);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, whole) = tiny_run(dir.path(), 10);
    let parts = dir.path().join("parts");
    let args = ["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&parts), "--seed", "3"];

    // Three epochs: all of D1, then one of D2.
    ok(&[&args[..], &["--max-epochs", "3"]].concat());
    assert!(parts.join("d1.ckpt").exists() && !parts.join("d2.ckpt").exists());
    let d1_frozen = fs::read(parts.join("d1.ckpt")).unwrap();
    let mut rounds = 0;
    while !parts.join("hsr.ckpt").exists() {
        ok(&[&args[..], &["--resume", "--max-epochs", "1"]].concat());
        rounds += 1;
        assert!(rounds < 10);
    }
    assert_eq!(fs::read(parts.join("d1.ckpt")).unwrap(), d1_frozen);
    for f in ["d1.ckpt", "d2.ckpt", "hsr.ckpt", "d1_loss.csv", "d2_loss.csv", "hsr_loss.csv", "val_ablation.csv"] {
        assert_eq!(fs::read(whole.join(f)).unwrap(), fs::read(parts.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fixture_eval_reproduces_count_rows() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("counts.csv");
    fs::write(&fx, "method,total,tp,fp\nours,1882,1814,54\nssd,1882,1804,112\nhourglass,1882,1800,83\n").unwrap();
    let out = dir.path().join("out");
    ok(&["eval", "--fixture", s(&fx), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "total,tp,fp,recall,precision,fscore");
    assert_eq!(rows[1], "1882,1814,54,0.9638,0.9710,0.9674");
    assert!(rows[2].starts_with("1882,1804,112,0.9585,0.9415,"));
    assert!(rows[3].starts_with("1882,1800,83,0.9564,0.9559,"));
    assert!(out.join("config.txt").exists());

    fs::write(&fx, "total,tp\n3,1\n").unwrap();
    assert_eq!(code(&dendrite(&["eval", "--fixture", s(&fx), "--out", s(&out)])), EXIT_DATA);
    assert_eq!(code(&dendrite(&["eval", "--out", s(&out)])), EXIT_CONFIG);
}

#[test]
fn sweeps_ablation_and_check_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, models) = tiny_run(dir.path(), 10);
    let crop = dir.path().join("crop");
    ok(&["sweep", "--kind", "crop", "--config", s(&cfg), "--data", s(&data), "--models", s(&models), "--out", s(&crop)]);
    let csv = fs::read_to_string(crop.join("crop_sweep.csv")).unwrap();
    let settings: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next().unwrap(), "setting,recall,precision,fscore");
    assert_eq!(settings, ["none", "12x12"]);
    let fill = dir.path().join("fill");
    ok(&["sweep", "--kind", "intensity", "--config", s(&cfg), "--data", s(&data), "--out", s(&fill)]);
    let csv = fs::read_to_string(fill.join("intensity_sweep.csv")).unwrap();
    let settings: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["0", "gaussian"]);

    let abl = dir.path().join("abl");
    let base = ["ablate", "--config", s(&cfg), "--models", s(&models), "--data", s(&data), "--out", s(&abl)];
    ok(&base);
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["stage", "ESD", "+HSD", "+HSR"]);

    // A silent second stage leaves the first stage's points as they are, so the check holds.
    let silent = dir.path().join("silent");
    constant_heads(&models, &silent, &[("d2", 0.0)]);
    let sbase = ["ablate", "--config", s(&cfg), "--models", s(&silent), "--data", s(&data), "--out", s(&abl)];
    assert_eq!(code(&dendrite(&[&sbase[..], &["--check"]].concat())), 0);
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[1].split_once(',').unwrap().1, rows[2].split_once(',').unwrap().1);
    // A second stage whose head outputs a constant 1 floods the whole map, fusing every
    // first-stage detection into one blob; with the first stage producing two separate
    // blobs on an image with two or more cores, recall has to drop.
    let flood = dir.path().join("flood");
    constant_heads(&models, &flood, &[("d2", 1.0)]);

    let opts = RunConfig::load(&cfg).unwrap().cascade().unwrap();
    let m = load_models(&flood, &opts).unwrap();
    let test = load_labeled(&data, "test").unwrap();
    let alpha = (0..100)
        .map(|k| k as f64 / 100.0)
        .find(|&a| {
            test.iter().any(|(_, s)| {
                let raw = m.d1.forward(&s.image).unwrap();
                s.cores.len() >= 2 && extract_peaks(&binarize_heatmap(&raw, a)).len() >= 2
            })
        })
        .expect("some threshold splits the first-stage map");
    let beta = alpha.min(0.5);
    let flood_args = [
        "--set", &format!("alpha={alpha}"), "--set", &format!("beta={beta}"), "--set", "deviation=100", "--check",
    ];
    let fbase = ["ablate", "--config", s(&cfg), "--models", s(&flood), "--data", s(&data), "--out", s(&abl)];
    let out = dendrite(&[&fbase[..], &flood_args].concat());
    assert_eq!(code(&out), EXIT_CHECK, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("+HSD recall"));
}

#[test]
fn empty_scene_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _, trained) = tiny_run(dir.path(), 5);
    let models = dir.path().join("silent");
    constant_heads(&trained, &models, &[("d1", 0.0), ("d2", 0.0)]);
    let black = dir.path().join("black.png");
    dendrite_core::image_io::write_rgb_png(
        &black,
        &dendrite_core::Tensor::zeros(dendrite_core::nn::Shape::new(1, 3, 32, 32)),
    )
    .unwrap();
    let det = dir.path().join("det");
    ok(&[
        "detect", "--config", s(&cfg), "--models", s(&models), "--image",
        s(&black), "--out", s(&det),
    ]);
    assert_eq!(fs::read_to_string(det.join("black").join("pred.csv")).unwrap(), "row,col,stage\n");
    assert!(det.join("black").join("overlay.png").exists());
}
