use std::path::Path;
use std::process::{Command, Output};

use gmmlab_core::io::read_mask_csv;

fn gmmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmmlab"))
        .args(args)
        .env_remove("GMMLAB_DATA_DIR")
        .output()
        .expect("run gmmlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn mask_gen_center_surround_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = gmmlab(&["mask-gen", "--grid", "8", "--kernels", "0.6:2.0,-0.8:0.2", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let m = read_mask_csv(&out).unwrap();
    assert_eq!(m.shape(), (64, 64));
    for i in 0..64 {
        assert!((m.get(i, i) + 0.2).abs() < 1e-6);
    }
}

#[test]
fn mask_gen_empty_kernels_and_weight_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let zero = dir.path().join("z.csv");
    assert_eq!(code(&gmmlab(&["mask-gen", "--grid", "2", "--kernels", "", "--out", p(&zero)])), 0);
    let z = read_mask_csv(&zero).unwrap();
    assert_eq!(z.shape(), (4, 4));
    assert!(z.as_slice().iter().all(|&v| v == 0.0));

    let w = dir.path().join("w.csv");
    let o = gmmlab(&["mask-gen", "--grid", "3", "--kernels", "1:1", "--weight-matrix", "--out", p(&w)]);
    assert_eq!(code(&o), 0);
    let w = read_mask_csv(&w).unwrap();
    assert_eq!(w.shape(), (5, 5));
    assert_eq!(w.get(2, 2), 1.0);
}

#[test]
fn mask_gen_random_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        assert_eq!(code(&gmmlab(&["mask-gen", "--grid", "4", "--random", "5", "--seed", seed, "--out", p(out)])), 0);
    }
    let read = |f: &Path| std::fs::read(f).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn malformed_kernels_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    for bad in ["0.6", "0.6:x", "a:1", "1:2,,3:4"] {
        let o = gmmlab(&["mask-gen", "--grid", "3", "--kernels", bad, "--out", p(&out)]);
        assert_eq!(code(&o), 1, "{bad}");
        assert!(!o.stderr.is_empty());
        assert!(!out.exists());
    }
    // both sources at once
    let o = gmmlab(&["mask-gen", "--grid", "3", "--kernels", "1:1", "--random", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn render_endpoints_and_constant() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    std::fs::write(&csv, "0,1\n1,0\n").unwrap();
    let pgm = dir.path().join("m.pgm");
    assert_eq!(code(&gmmlab(&["render", "--in", p(&csv), "--out", p(&pgm)])), 0);
    let img = gmmlab_core::io::read_pgm(&pgm).unwrap();
    assert_eq!(img.pixels, vec![0, 255, 255, 0]);

    std::fs::write(&csv, "3,3,3\n3,3,3\n").unwrap();
    assert_eq!(code(&gmmlab(&["render", "--in", p(&csv), "--out", p(&pgm), "--mode", "p2"])), 0);
    let img = gmmlab_core::io::read_pgm(&pgm).unwrap();
    assert!(img.pixels.iter().all(|&v| v == 128));
    assert!(std::fs::read_to_string(&pgm).unwrap().starts_with("P2"));
}

#[test]
fn gradcheck_modes_pass_and_report_groups() {
    for args in [
        vec!["gradcheck"],
        vec!["gradcheck", "--mask", "elm"],
        vec!["gradcheck", "--mask", "none", "--grid", "3", "--heads", "1"],
        vec!["gradcheck", "--full-model"],
        vec!["gradcheck", "--full-model", "--mask", "elm", "--seed", "3"],
    ] {
        let o = gmmlab(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stdout(&o));
        let out = stdout(&o);
        assert!(out.contains("max rel error"), "{out}");
    }
    let o = gmmlab(&["gradcheck", "--corrupt-grad", "0.01"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&gmmlab(&["gradcheck", "--heads", "3"])), 1);
}

#[test]
fn fit_zero_target_and_k0() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("z.csv");
    assert_eq!(code(&gmmlab(&["mask-gen", "--grid", "4", "--kernels", "", "--out", p(&target)])), 0);
    let out = dir.path().join("k.csv");
    let o = gmmlab(&["fit", "--target", p(&target), "--kernels", "1", "--steps", "3000", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let rmse: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("rmse "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(rmse < 1e-4, "{rmse}");
    let ks = gmmlab_core::io::read_kernels_csv(&out).unwrap();
    assert_eq!(ks.len(), 1);

    let o = gmmlab(&["fit", "--target", p(&target), "--kernels", "0", "--out", p(&dir.path().join("k0.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("k0.csv").exists());
}

#[test]
fn fit_rejects_non_grid_targets() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("t.csv");
    // square, but 5 is not a perfect square
    let row = vec!["0.5"; 5].join(",");
    std::fs::write(&target, vec![row; 5].join("\n")).unwrap();
    let o = gmmlab(&["fit", "--target", p(&target), "--kernels", "1", "--out", p(&dir.path().join("k.csv"))]);
    assert_eq!(code(&o), 2);
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train", "--out-dir", out, "--set", "image_side=16", "--set", "dim=16", "--set", "heads=2",
        "--set", "train_size=64", "--set", "test_size=16", "--set", "batch_size=32",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_zero_epochs_writes_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = gmmlab(&train_args(p(&out), &["--epochs", "0"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
    assert!(out.join("checkpoint.bin").exists());
    let params: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("params.json")).unwrap()).unwrap();
    assert!(params["total_params"].as_u64().unwrap() > 0);
}

#[test]
fn train_reports_shared_mask_params() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let extra = ["--epochs", "0", "--mask", "gmm", "--set", "kernels=5", "--set", "share_heads=true", "--set", "depth=15"];
    let o = gmmlab(&train_args(p(&out), &extra));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let params: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("params.json")).unwrap()).unwrap();
    assert_eq!(params["mask_params"], 150);
}

#[test]
fn train_one_epoch_metrics_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = gmmlab(&train_args(p(&out), &["--epochs", "1", "--mask", "elm"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let m: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["epoch", "lr", "train_loss", "train_acc", "test_acc"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }
    assert_eq!(m["epoch"], 1);
}

#[test]
fn train_config_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "image_side = 16\ndim = 16\nheads = 2\ntrain_size = 32\ntest_size = 8\nepochs = 0\n").unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&gmmlab(&["train", "--config", p(&cfg), "--out-dir", p(&out)])), 0);
    let written = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("image_side = 16"));

    std::fs::write(&cfg, "depht = 3\n").unwrap();
    assert_eq!(code(&gmmlab(&["train", "--config", p(&cfg), "--out-dir", p(&out)])), 1);
    let missing = dir.path().join("nope.cfg");
    assert_eq!(code(&gmmlab(&["train", "--config", p(&missing), "--out-dir", p(&out)])), 2);
    // CIFAR without a data location
    assert_eq!(code(&gmmlab(&["train", "--dataset", "cifar10", "--out-dir", p(&out)])), 2);
    // CIFAR directory without the batch files
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = gmmlab(&["train", "--dataset", "cifar10", "--data-dir", p(&empty), "--out-dir", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_reads_cifar_from_nested_directory() {
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("cifar-10-batches-bin");
    std::fs::create_dir(&nested).unwrap();
    let record = |label: u8| {
        let mut r = vec![label];
        r.extend((0..3072).map(|i| (i % 251) as u8));
        r
    };
    let batch: Vec<u8> = (0..4u8).flat_map(|l| record(l % 10)).collect();
    for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
        std::fs::write(nested.join(name), &batch).unwrap();
    }
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_gmmlab"))
        .args(["train", "--dataset", "cifar10", "--epochs", "1", "--set", "dim=16", "--set", "heads=2", "--set", "patch=8"])
        .args(["--set", "depth=1", "--out-dir", p(&out)])
        .env("GMMLAB_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("20 train / 4 test"), "{}", stdout(&o));
}

#[test]
fn sweep_rows_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = gmmlab(&[
        "sweep-kernels", "--k-list", "2,0,2,1", "--seeds", "2", "--epochs", "0", "--set", "image_side=16", "--set",
        "dim=16", "--set", "heads=2", "--set", "train_size=32", "--set", "test_size=16", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "mask,k,seed,final_test_acc");
    // K=0 gives a baseline row and an all-zero-mask row per seed
    assert_eq!(rows.len(), 1 + 2 * 2 + 2 + 2);
    let labels: Vec<(String, String)> = rows[1..]
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    assert_eq!(labels.iter().filter(|(m, k)| m == "none" && k == "0").count(), 2);
    assert_eq!(labels.iter().filter(|(m, k)| m == "gmm" && k == "0").count(), 2);
    assert_eq!(labels.iter().filter(|(_, k)| k == "1").count(), 2);
    assert_eq!(labels.iter().filter(|(_, k)| k == "2").count(), 2);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&gmmlab(&["--help"])), 0);
    assert_eq!(code(&gmmlab(&["train", "--help"])), 0);
    assert_eq!(code(&gmmlab(&["--version"])), 0);
    assert_eq!(code(&gmmlab(&["train"])), 1);
}
