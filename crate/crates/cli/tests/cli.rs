use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oodkit::eval::parse_json_report;
use oodkit::store::read_npy_f64;

fn oodkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodkit"))
        .args(args)
        .env_remove("OODKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("bundle-{seed}"));
    let o = oodkit(&[
        "synth",
        "--seed",
        &seed.to_string(),
        "--n-per-class",
        "100",
        "--n-test",
        "100",
        "--n-ood",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(stdout(&o).trim())
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = oodkit(&["synth", "--seed", "7", "--dim", "16", "--classes", "4", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert!(a.join("manifest.json").exists());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn synth_rejects_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oodkit(&["synth", "--classes", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = oodkit(&["synth", "--kind", "adversarial", "--classes", "2", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_adversarial_writes_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("adv");
    let o = oodkit(&["synth", "--kind", "adversarial", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let marker: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("adversarial.json")).unwrap()).unwrap();
    assert_eq!(marker["victim_class"], 3);
    assert_eq!(marker["global_victim_ones"], 0);
}

#[test]
fn fit_writes_detector_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 1);
    let out = tmp.path().join("dets");
    let o = oodkit(&[
        "fit",
        "--manifest",
        manifest.to_str().unwrap(),
        "--method",
        "mds",
        "--method",
        "dice",
        "--p",
        "90",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("mds").join("detector.json").exists());
    let mask = read_npy_f64(out.join("dice").join("mask.npy")).unwrap();
    let (d, c) = (mask.nrows(), mask.ncols());
    let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
    assert_eq!(ones, d * c - 90 * d * c / 100);
}

#[test]
fn fit_usage_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 2);
    let m = manifest.to_str().unwrap();
    let out = tmp.path().join("d");
    let o = oodkit(&["fit", "--manifest", m, "--method", "react", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = oodkit(&["fit", "--manifest", m, "--method", "dice", "--p", "100", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    // k larger than the bank is only detectable at fit time
    let o = oodkit(&["fit", "--manifest", m, "--method", "knn", "--k", "100000", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = oodkit(&["fit", "--manifest", "missing.json", "--method", "msp", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
}

#[test]
fn eval_reports_wide_margin() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 3);
    let o = oodkit(&["eval", "--manifest", manifest.to_str().unwrap(), "--method", "msp", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = parse_json_report(&stdout(&o)).unwrap();
    assert!(report.detectors[0].far.as_ref().unwrap().mean >= 0.99);
}

#[test]
fn eval_formats_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4);
    let m = manifest.to_str().unwrap();
    let run = |fmt: &str| {
        let o = oodkit(&["eval", "--manifest", m, "--method", "energy", "--method", "mds", "--format", fmt]);
        assert_eq!(o.status.code(), Some(0));
        stdout(&o)
    };
    let csv = run("csv");
    let md = run("markdown");
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let pct = 100.0 * cols[3].parse::<f64>().unwrap();
        let cell = format!("| {} | {} | {} | {:.2} ± ", cols[0], cols[1], cols[2], pct);
        assert!(md.contains(&cell), "{cell} not in\n{md}");
    }
}

#[test]
fn eval_aggregates_over_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests: Vec<PathBuf> = (10..13).map(|s| synth(tmp.path(), s)).collect();
    let mut args = vec!["eval", "--method", "msp", "--format", "json"];
    for m in &manifests {
        args.push("--manifest");
        args.push(m.to_str().unwrap());
    }
    let o = oodkit(&args);
    assert_eq!(o.status.code(), Some(0));
    let report = parse_json_report(&stdout(&o)).unwrap();
    let near = &report.detectors[0].datasets[0].auroc;
    assert_eq!(near.values.len(), 3);
    assert!(near.std > 0.0);
}

#[test]
fn eval_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 5);
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{
  "manifests": ["bundle-5/manifest.json"],
  "detectors": [{"method": "knn", "k": 3}, {"method": "dice-col", "p": 70}],
  "format": "csv",
  "seed": 9,
  "tpr": 0.9
}"#,
    )
    .unwrap();
    let out = tmp.path().join("report.csv");
    let o = oodkit(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("KNN(k=3)"));
    assert!(text.contains("DICE-COL(p=70)"));

    let o = oodkit(&["eval", "--config", cfg.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&cfg, r#"{"manifests": ["x"], "detectors": [{"method": "react"}]}"#).unwrap();
    let o = oodkit(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn score_with_saved_detector() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 6);
    let dets = tmp.path().join("dets");
    let o = oodkit(&[
        "fit", "--manifest", manifest.to_str().unwrap(), "--method", "rmds-pca", "--pca-components", "4",
        "--out", dets.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let input = manifest.parent().unwrap().join("id_test_features.npy");
    let out = tmp.path().join("scores.npy");
    let o = oodkit(&[
        "score", "--detector", dets.join("rmds-pca").to_str().unwrap(),
        "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let scores = read_npy_f64(&out).unwrap();
    assert_eq!(scores.shape(), &[100]);
    assert!(scores.data().iter().all(|v| v.is_finite()));
}

#[test]
fn thread_cap_env() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 8);
    let m = manifest.to_str().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_oodkit"))
            .args(["eval", "--manifest", m, "--method", "knn", "--format", "csv"])
            .env("OODKIT_THREADS", threads)
            .output()
            .unwrap()
    };
    let one = run("1");
    let four = run("4");
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(run("zero").status.code(), Some(2));
}
