//! End-to-end runs of the `hsiad` binary on tiny synthetic data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hsiad::detectors::{load_score_map, ScoreMap};
use hsiad::io::save_truth;
use hsiad::net::checkpoint::save_checkpoint;
use hsiad::net::{init_params, NetParams, NetworkConfig};
use hsiad::GroundTruthMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn hsiad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsiad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hsiad(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir`, relative path to contents.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

const SMALL_SYNTH: &str = r#"{
  "train_count": 3,
  "test_count": 2,
  "scene": { "size": [16, 16, 6], "anomaly_area_range": [2, 4] }
}"#;

fn small_dataset(tmp: &TempDir) -> PathBuf {
    let cfg = write(tmp.path(), "synth.json", SMALL_SYNTH);
    let out = tmp.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--seed", "3", "--out", p(&out)]);
    out
}

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        channels: 8,
        heads: [2, 4, 8, 4, 2],
        window_partition: 4,
        mlp_ratio: 4,
        input_size: (16, 16, 6),
        zero_residual_start: true,
    }
}

#[test]
fn synth_is_deterministic_and_leaves_train_unlabelled() {
    let tmp = TempDir::new().unwrap();
    let a = small_dataset(&tmp);
    let cfg = tmp.path().join("synth.json");
    let b = tmp.path().join("again");
    ok(&["synth", "--config", p(&cfg), "--seed", "3", "--out", p(&b)]);
    assert_eq!(tree(&a), tree(&b));
    let files = tree(&a);
    assert!(files.keys().any(|k| k.starts_with("test") && k.extension().is_some_and(|e| e == "pgm")));
    assert!(!files.keys().any(|k| k.starts_with("train") && k.extension().is_some_and(|e| e == "pgm")));
    assert!(files.contains_key(Path::new("manifest.json")));
}

#[test]
fn bad_configs_fail_without_leaving_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"train_count": 2, "colour": "red"}"#);
    let out = tmp.path().join("never");
    let res = hsiad(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("colour"));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);

    // Existing output is never clobbered without --force.
    let data = small_dataset(&tmp);
    let res = hsiad(&["synth", "--config", p(&tmp.path().join("synth.json")), "--out", p(&data)]);
    assert!(!res.status.success());
}

#[test]
fn train_one_epoch_writes_checkpoint_and_log() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(&tmp);
    let cfg = write(
        tmp.path(),
        "train.json",
        r#"{
  "network": { "channels": 8, "window_partition": 4 },
  "train": {
    "batch_size": 2,
    "max_epochs": 5,
    "mask_params": { "grid_k": 4, "n_range": [1, 4], "area_range": [2, 6] },
    "msgms": { "stability_c": 1.0, "scales": 3 }
  }
}"#,
    );
    let out = tmp.path().join("model");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--max-epochs", "1", "--out", p(&out)]);
    let log = fs::read_to_string(out.join("epochs.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("1,"));
    assert_eq!(rows[1].split(',').nth(3), Some("1"));
    assert!(out.join("model.json").is_file() && out.join("model.raw").is_file());
}

#[test]
fn identity_checkpoint_reproduces_grx() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(&tmp);
    let cfg = tiny_network();
    let params: NetParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let ckpt = tmp.path().join("identity");
    save_checkpoint(&params, &cfg, &ckpt).unwrap();

    let test = data.join("test");
    let grx_out = tmp.path().join("grx");
    let enh_out = tmp.path().join("enh");
    ok(&["detect", "--input", p(&test), "--detector", "grx", "--out", p(&grx_out)]);
    ok(&[
        "detect", "--input", p(&test), "--detector", "enhanced", "--checkpoint", p(&ckpt), "--emit-residual",
        "--out", p(&enh_out),
    ]);
    for id in ["scene000", "scene001"] {
        let a: ScoreMap<f64> = load_score_map(&grx_out.join(id)).unwrap();
        let b: ScoreMap<f64> = load_score_map(&enh_out.join(id)).unwrap();
        for (x, y) in a.scores().iter().zip(b.scores()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
        let residual = fs::read(enh_out.join("residual").join(format!("{id}.raw"))).unwrap();
        assert!(residual.iter().all(|&b| b == 0));
    }
    let timing = fs::read_to_string(enh_out.join("timing.csv")).unwrap();
    for line in timing.lines().skip(1) {
        let secs: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(secs > 0.0);
    }

    // A checkpoint for another input size is rejected.
    let other = NetworkConfig { input_size: (32, 32, 6), ..cfg };
    let wrong: NetParams<f32> = init_params(&other, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    save_checkpoint(&wrong, &other, &tmp.path().join("wrong")).unwrap();
    let res = hsiad(&[
        "detect", "--input", p(&test), "--detector", "enhanced", "--checkpoint",
        p(&tmp.path().join("wrong")), "--out", p(&tmp.path().join("x")),
    ]);
    assert!(!res.status.success());
}

#[test]
fn lrx_defaults_and_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "synth.json",
        r#"{"train_count": 1, "test_count": 2, "scene": {"size": [32, 32, 5], "anomaly_area_range": [3, 6]}}"#,
    );
    let data = tmp.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    let test = data.join("test");
    let lrx_out = tmp.path().join("lrx");
    let grx_out = tmp.path().join("grx");
    ok(&["detect", "--input", p(&test), "--detector", "lrx", "--out", p(&lrx_out)]);
    ok(&["detect", "--input", p(&test), "--out", p(&grx_out)]);

    let eval_out = tmp.path().join("eval");
    ok(&[
        "eval", "--scores", p(&lrx_out), "--truth", p(&test), "--baseline", p(&grx_out), "--out", p(&eval_out),
    ]);
    let metrics = fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.lines().last().unwrap().starts_with("MEAN,"));
    let cmp = fs::read_to_string(eval_out.join("comparison.csv")).unwrap();
    assert!(cmp.starts_with("scene_id,raw_auc,enhanced_auc"));
}

#[test]
fn eval_of_perfect_maps_and_missing_truth() {
    let tmp = TempDir::new().unwrap();
    let scores = tmp.path().join("scores");
    let truth = tmp.path().join("truth");
    fs::create_dir_all(&scores).unwrap();
    fs::create_dir_all(&truth).unwrap();
    for (i, id) in ["a", "b"].iter().enumerate() {
        let labels: Vec<bool> = (0..64).map(|k| k % 9 == i).collect();
        let gt = GroundTruthMap::new(8, 8, labels.clone()).unwrap();
        save_truth(&gt, &truth.join(format!("{id}.pgm"))).unwrap();
        let map = ScoreMap::new(8, 8, labels.iter().map(|&l| f64::from(u8::from(l))).collect()).unwrap();
        hsiad::detectors::save_score_map(&map, &scores.join(id)).unwrap();
    }
    let out = tmp.path().join("eval");
    ok(&["eval", "--scores", p(&scores), "--truth", p(&truth), "--out", p(&out)]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mean = metrics.lines().last().unwrap();
    assert_eq!(mean.split(',').nth(1), Some("1"));

    fs::remove_file(truth.join("b.pgm")).unwrap();
    let res = hsiad(&["eval", "--scores", p(&scores), "--truth", p(&truth), "--out", p(&tmp.path().join("e2"))]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("scene b"));
}

#[test]
fn mask_preview_is_seeded_and_checks_bounds() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["mask-preview", "--seed", "4", "--count", "5", "--out", p(&a)]);
    ok(&["mask-preview", "--seed", "4", "--count", "5", "--out", p(&b)]);
    assert_eq!(tree(&a), tree(&b));
    let stats: serde_json::Value = serde_json::from_slice(&fs::read(a.join("masks.json")).unwrap()).unwrap();
    for s in stats.as_array().unwrap() {
        let n = s["regions"].as_u64().unwrap();
        assert!((1..=32).contains(&n));
        assert!(s["areas"].as_array().unwrap().iter().all(|v| (3..=20).contains(&v.as_u64().unwrap())));
    }

    let at_limit = write(
        tmp.path(),
        "limit.json",
        r#"{"mask": {"grid_k": 8, "n_range": [64, 64], "area_range": [1, 1]}, "count": 1}"#,
    );
    ok(&["mask-preview", "--config", p(&at_limit), "--out", p(&tmp.path().join("limit"))]);
    let over = write(
        tmp.path(),
        "over.json",
        r#"{"mask": {"grid_k": 8, "n_range": [65, 65], "area_range": [1, 1]}, "count": 1}"#,
    );
    let res = hsiad(&["mask-preview", "--config", p(&over), "--out", p(&tmp.path().join("over"))]);
    assert!(!res.status.success());
}
