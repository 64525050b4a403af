use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mcfbc::metrics::{MetricsReport, ScoreSet};

fn mcfbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcfbc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p
}

const SMALL_RUN: &str = r#"{
  "train": {
    "epochs": 3,
    "seed": 7,
    "batch_size": 8,
    "model": {
      "color_spaces": ["rgb", "ycbcr"],
      "fbc": {"k": 8},
      "backbone": {"channels": [4, 8], "input_size": 16}
    }
  }
}"#;

#[test]
fn synth_split_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mcfbc(&["synth", "--seed", "3", "--n", "20", "--size", "16", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("manifest.csv");
    let out = mcfbc(&["split", "--ratio", "3:1:1", "--seed", "5", path(&manifest)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "train=24 valid=8 test=8");

    let config = write_config(dir.path(), SMALL_RUN);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = mcfbc(&["train", "--config", path(&config), "--data", path(&manifest), "--out", path(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap()
    };
    let log_a = run("a");
    let log_b = run("b");
    assert_eq!(log_a, log_b);
    let lines: Vec<serde_json::Value> = log_a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for key in ["epoch", "lr", "loss", "train_acc", "valid_acer"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }

    let eval_dir = dir.path().join("eval");
    let ckpt = dir.path().join("a").join("model.fbc");
    let out = mcfbc(&["eval", "--ckpt", path(&ckpt), "--data", path(&manifest), "--split", "test", "--out", path(&eval_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert!(report.acer_identity_holds());
    assert_eq!(report.samples, 8);
    let scores = ScoreSet::read_csv(&eval_dir.join("scores.csv")).unwrap();
    assert_eq!(MetricsReport::compute(&scores, None).unwrap(), report);
}

#[test]
fn resume_continues_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mcfbc(&["synth", "--seed", "4", "--n", "15", "--size", "16", path(&data)]).status.success());
    let config = write_config(dir.path(), SMALL_RUN);
    let full = dir.path().join("full");
    assert!(mcfbc(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&full)]).status.success());

    let part = dir.path().join("part");
    let short = write_config(dir.path(), &SMALL_RUN.replace("\"epochs\": 3", "\"epochs\": 1"));
    assert!(mcfbc(&["train", "--config", path(&short), "--data", path(&data), "--out", path(&part)]).status.success());
    let config = write_config(dir.path(), SMALL_RUN);
    let out = mcfbc(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&part), "--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(full.join("train_log.jsonl")).unwrap(),
        fs::read_to_string(part.join("train_log.jsonl")).unwrap()
    );
    assert_eq!(fs::read(full.join("model.fbc")).unwrap(), fs::read(part.join("model.fbc")).unwrap());
}

#[test]
fn converged_toy_run_fits_its_training_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mcfbc(&["synth", "--seed", "1", "--n", "10", "--size", "16", "--delta", "0.3", path(&data)]).status.success());
    let config = write_config(
        dir.path(),
        &SMALL_RUN
            .replace("\"epochs\": 3", "\"epochs\": 40")
            .replace("\"seed\": 7", "\"seed\": 7, \"model_selection\": \"last_epoch\""),
    );
    let run = dir.path().join("run");
    assert!(mcfbc(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&run)]).status.success());
    let eval_dir = dir.path().join("eval");
    let out = mcfbc(&[
        "eval",
        "--ckpt",
        path(&run.join("model.fbc")),
        "--data",
        path(&data),
        "--split",
        "train",
        "--threshold",
        "0.5",
        "--out",
        path(&eval_dir),
    ]);
    assert!(out.status.success());
    let report: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#);
    let out = mcfbc(&["train", "--config", path(&config), "--data", "nowhere.csv", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"train": {"epochs": 1}}"#);
    let missing = dir.path().join("missing.csv");
    let out = mcfbc(&["train", "--config", path(&config), "--data", path(&missing), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn color_conversion_and_invalid_pair() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mcfbc(&["synth", "--seed", "2", "--n", "5", "--size", "16", path(&data)]).status.success());
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let first = manifest.lines().nth(1).unwrap().split(',').next().unwrap();
    let input = data.join(first);
    let ycc = dir.path().join("ycc.png");
    let back = dir.path().join("back.ppm");
    assert!(mcfbc(&["color", "--from", "rgb", "--to", "ycbcr", path(&input), path(&ycc)]).status.success());
    assert!(mcfbc(&["color", "--from", "ycbcr", "--to", "rgb", path(&ycc), path(&back)]).status.success());
    let a = image::open(&input).unwrap().to_rgb8();
    let b = image::open(&back).unwrap().to_rgb8();
    let worst = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y)).max().unwrap();
    assert!(worst <= 2, "8-bit round trip drift {worst}");

    let out = mcfbc(&["color", "--from", "rgb", "--to", "rgb", path(&input), path(&ycc)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fault_injection_fails() {
    let out = mcfbc(&["gradcheck", "--seed", "3", "--size", "tiny", "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert!(report.get("skipped_kinks").is_some());

    let out = mcfbc(&["gradcheck", "--seed", "3", "--size", "tiny", "--corrupt-backward"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL"));
}

#[test]
fn oracle_table_is_green_and_deterministic() {
    let a = mcfbc(&["oracle"]);
    assert!(a.status.success());
    let text = String::from_utf8_lossy(&a.stdout).to_string();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert_eq!(mcfbc(&["oracle"]).stdout, a.stdout);

    let json = mcfbc(&["oracle", "--json"]);
    let parsed: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 4);
}
