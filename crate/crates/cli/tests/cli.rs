//! End-to-end runs of the `selfie` binary on toy backends.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn selfie(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfie"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = selfie(dir, args);
    assert!(
        out.status.success(),
        "selfie {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(p.as_ref()).unwrap()).unwrap()
}

fn write_config(dir: &Path, value: Value) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, value.to_string()).unwrap();
    p
}

fn planted(epochs: usize) -> Value {
    json!({
        "backend": {"name": "echo", "seed": 7},
        "data": {"synthetic": {"task": "planted", "n_train": 256, "n_val": 32, "sigma": 0.05, "seed": 0}},
        "train": {"epochs": epochs, "batch_size": 32, "label_format": "raw"},
        "eval": {
            "selections": ["label_match", "loss"],
            "label_format": "raw",
            "generation": {"sampling": {"mode": "greedy"}, "max_tokens": 2, "seed": 0}
        },
        "probe": {"layers": [0, 1], "positions": [0, 1, 2], "heatmap": {"samples": 2, "max_tokens": 2}}
    })
}

fn trained(dir: &Path) -> String {
    write_config(dir, planted(1));
    ok(dir, &["train", "--config", "run.json", "--out", "t"]);
    "t/checkpoints/final.siad".to_string()
}

#[test]
fn missing_dataset_writes_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, json!({"data": {"train": "absent/train.jsonl", "val": "absent/val.jsonl"}}));
    let out = selfie(dir, &["train", "--config", "run.json", "--out", "r"]);
    assert_ne!(out.status.code(), Some(0));
    let err = read_json(dir.join("r/error.json"));
    assert_eq!(err["error"], "io");
    assert!(err["path"].as_str().unwrap().contains("absent/train.jsonl"), "{err}");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, planted(2));
    for r in ["a", "b"] {
        ok(dir, &["train", "--config", "run.json", "--out", &format!("t{r}"), "--seed", "4"]);
        ok(
            dir,
            &[
                "eval",
                "--config",
                "run.json",
                "--out",
                &format!("e{r}"),
                "--checkpoint",
                &format!("t{r}/checkpoints/final.siad"),
                "--seed",
                "4",
            ],
        );
    }
    for f in ["ta/curve.jsonl", "ea/report.json", "ea/items.jsonl", "ea/best_of.csv"] {
        let other = f.replacen('a', "b", 1);
        assert_eq!(std::fs::read(dir.join(f)).unwrap(), std::fs::read(dir.join(&other)).unwrap(), "{f}");
    }
    let summary = read_json(dir.join("ta/summary.json"));
    assert_eq!(summary["backend_unchanged"], true);
    assert!(dir.join("ta/checkpoints/best.siad").exists());
    assert!(dir.join("ta/config.json").exists());
}

#[test]
fn different_seed_changes_the_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, planted(1));
    ok(dir, &["train", "--config", "run.json", "--out", "a", "--seed", "1"]);
    ok(dir, &["train", "--config", "run.json", "--out", "b", "--seed", "2"]);
    assert_ne!(
        std::fs::read(dir.join("a/curve.jsonl")).unwrap(),
        std::fs::read(dir.join("b/curve.jsonl")).unwrap()
    );
}

#[test]
fn empty_selection_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = trained(dir);
    let mut cfg = planted(1);
    cfg["eval"]["selections"] = json!([]);
    write_config(dir, cfg);
    let out = selfie(dir, &["eval", "--config", "run.json", "--out", "e", "--checkpoint", &ckpt]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read_json(dir.join("e/error.json"))["error"], "usage");
}

#[test]
fn sweep_csv_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = planted(1);
    cfg["eval"]["sweep"] = json!([{"kind": "scalar_affine"}, {"kind": "full_rank"}, {"kind": "low_rank_only", "rank": 2}]);
    write_config(dir, cfg);
    ok(dir, &["eval", "--config", "run.json", "--out", "s"]);
    let csv = std::fs::read_to_string(dir.join("s/sweep.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    for col in ["arch", "params", "val_loss", "delta"] {
        assert!(header.contains(&col), "{header:?}");
    }
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn bridge_probe_needs_cases_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = trained(dir);
    let out = selfie(dir, &["probe", "bridge", "--config", "run.json", "--out", "b", "--checkpoint", &ckpt]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cases"));
    assert!(read_json(dir.join("b/error.json"))["message"].as_str().unwrap().contains("--cases"));
}

#[test]
fn bridge_probe_plots_one_image_per_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = trained(dir);
    let cases = [
        json!({"prompt": "w5 w6 w7", "bridge_aliases": ["w6"], "category": "x", "expected_answer": "w9"}),
        json!({"prompt": "w10 w11 w12 w13", "bridge_aliases": ["w12"], "category": "y", "expected_answer": "w8"}),
    ];
    let text: String = cases.iter().map(|c| c.to_string() + "\n").collect();
    std::fs::write(dir.join("cases.jsonl"), text).unwrap();
    ok(
        dir,
        &["probe", "bridge", "--config", "run.json", "--out", "b", "--checkpoint", &ckpt, "--cases", "cases.jsonl", "--plot"],
    );
    let maps = read_json(dir.join("b/heatmaps.json"));
    let grids = maps["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| ["trained", "untrained"].iter().filter(|m| !c[**m].is_null()).count())
        .sum::<usize>();
    let pngs = std::fs::read_dir(dir.join("b/plots"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(grids, 4);
    assert_eq!(pngs, grids);
    let summary = read_json(dir.join("b/summary.json"));
    let c = &summary["contingency"];
    let total: u64 = ["both", "trained_only", "untrained_only", "neither"]
        .iter()
        .map(|k| c[*k].as_u64().unwrap())
        .sum();
    assert_eq!(total, 2);
}

#[test]
fn zero_probe_confirms_bias() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = trained(dir);
    let stdout = ok(dir, &["probe", "zero", "--config", "run.json", "--out", "z", "--checkpoint", &ckpt]);
    assert!(stdout.contains("injected vector equals bias: true"), "{stdout}");
    assert_eq!(read_json(dir.join("z/zero_probe.json"))["equals_bias"], true);
}

#[test]
fn data_operations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, planted(1));
    ok(dir, &["data", "synth", "--config", "run.json", "--out", "d"]);
    let lines = |p: &str| std::fs::read_to_string(dir.join(p)).unwrap().lines().count();
    assert_eq!(lines("d/train.jsonl"), 256);

    ok(dir, &["data", "subsample", "--input", "d/train.jsonl", "--fraction", "0.5", "--out", "s"]);
    assert_eq!(lines("s/dataset.jsonl"), 128);

    ok(dir, &["data", "transform", "--input", "d/train.jsonl", "--uppercase", "--out", "u1"]);
    ok(dir, &["data", "transform", "--input", "u1/dataset.jsonl", "--uppercase", "--out", "u2"]);
    for f in ["dataset.jsonl", "dataset.sivb"] {
        assert_eq!(
            std::fs::read(dir.join("u1").join(f)).unwrap(),
            std::fs::read(dir.join("u2").join(f)).unwrap()
        );
    }
    let first: Value = serde_json::from_str(
        std::fs::read_to_string(dir.join("u1/dataset.jsonl")).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    let label = first["labels"][0].as_str().unwrap();
    assert_eq!(label, label.to_uppercase());

    ok(dir, &["data", "pca", "--input", "d/train.jsonl", "--out", "p"]);
    let csv = std::fs::read_to_string(dir.join("p/pca.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("component,cumulative_variance"));
    let vals: Vec<f64> = rows.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*vals.last().unwrap(), 1.0);

    ok(dir, &["plot", "--input", "p/pca.csv", "--out", "plots"]);
    assert!(dir.join("plots/pca.png").exists());
}

#[test]
fn toy_training_at_d32_is_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = json!({
        "backend": {"name": "echo", "seed": 7, "d": 32, "vocab_size": 32},
        "data": {"synthetic": {"task": "planted", "n_train": 4096, "n_val": 512, "sigma": 0.05, "seed": 0}},
        "train": {"epochs": 5, "label_format": "raw"}
    });
    write_config(dir, cfg);
    let t = Instant::now();
    ok(dir, &["train", "--config", "run.json", "--out", "t", "--plot"]);
    assert!(t.elapsed() < Duration::from_secs(60), "{:?}", t.elapsed());
    assert!(dir.join("t/plots/curve.png").exists());
    let curve = std::fs::read_to_string(dir.join("t/curve.jsonl")).unwrap();
    assert!(curve.lines().count() > 5);
}

#[test]
fn unknown_backend_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, planted(1));
    let out = selfie(dir, &["train", "--config", "run.json", "--out", "r", "--backend", "no-such-model"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(dir.join("r/error.json").exists());
}
