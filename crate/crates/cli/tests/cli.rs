use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn calib3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calib3d")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = calib3d(args);
    assert!(
        out.status.success(),
        "calib3d {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, preset: &str, seed: &str) -> PathBuf {
        let out = self.path(name);
        ok(&["--seed", seed, "synth", "--preset", preset, "--scans", "10", "--points", "400", "--out", p(&out)]);
        out.join("manifest.json")
    }

    fn write(&self, name: &str, contents: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, contents).unwrap();
        path
    }

    fn report(&self, manifest: &Path, params: Option<&Path>, name: &str) -> Value {
        let report = self.path(name);
        let mut args = vec!["eval", "--data", p(manifest), "--report", p(&report)];
        if let Some(params) = params {
            args.extend(["--params", p(params)]);
        }
        ok(&args);
        serde_json::from_slice(&fs::read(report).unwrap()).unwrap()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_scans_and_split() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "calibrated", "3");
    let m: Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["scans"].as_array().unwrap().len(), 10);
    assert_eq!(m["split"]["fit"].as_array().unwrap().len(), 8);
    assert_eq!(m["split"]["eval"].as_array().unwrap().len(), 2);
    let scan_files = fs::read_dir(ws.path("d"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "c3ds"))
        .count();
    assert_eq!(scan_files, 10);
    // 16-byte header plus 400 records of 14 + 4·8 bytes
    let first = fs::metadata(ws.path("d").join("scan_00000.c3ds")).unwrap().len();
    assert_eq!(first, 16 + 400 * (14 + 32));
}

#[test]
fn synth_is_reproducible() {
    let ws = Workspace::new();
    ws.synth("a", "depth-distort", "9");
    ws.synth("b", "depth-distort", "9");
    ws.synth("c", "depth-distort", "10");
    assert_eq!(dir_bytes(&ws.path("a")), dir_bytes(&ws.path("b")));
    assert_ne!(dir_bytes(&ws.path("a")), dir_bytes(&ws.path("c")));
}

#[test]
fn invalid_tau_exits_1() {
    let ws = Workspace::new();
    let out = calib3d(&["synth", "--preset", "temp-distort", "--tau", "0", "--out", p(&ws.path("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau > 0"));
}

#[test]
fn missing_manifest_exits_2() {
    let ws = Workspace::new();
    let out = calib3d(&["eval", "--data", p(&ws.path("nope.json")), "--report", p(&ws.path("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = calib3d(&["fit", "--method", "temps", "--data", p(&ws.path("nope.json")), "--out", p(&ws.path("p.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(calib3d(&["fit", "--method", "nonsense"]).status.code(), Some(1));
    assert_eq!(calib3d(&["--help"]).status.code(), Some(0));
}

#[test]
fn unit_temperature_matches_uncalibrated() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "temp-distort", "1");
    let params = ws.write("t1.json", r#"{"method":"temps","params":{"t":1.0},"s_classes":8}"#);

    let mut unit = ws.report(&manifest, Some(&params), "unit.json");
    let mut uncal = ws.report(&manifest, None, "uncal.json");
    unit["method"] = Value::Null;
    uncal["method"] = Value::Null;
    assert_eq!(unit, uncal);

    // the same holds through sidecars
    let sidecars = ws.path("sc");
    ok(&["apply", "--params", p(&params), "--data", p(&manifest), "--out", p(&sidecars)]);
    let via_sidecars = ws.path("via.json");
    ok(&["eval", "--data", p(&manifest), "--sidecars", p(&sidecars), "--report", p(&via_sidecars)]);
    let mut via: Value = serde_json::from_slice(&fs::read(via_sidecars).unwrap()).unwrap();
    via["method"] = Value::Null;
    assert_eq!(via, uncal);
}

#[test]
fn negative_depth_scale_is_reported() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "calibrated", "2");
    let params = ws.write(
        "bad.json",
        r#"{"method":"depts","params":{"t1":1.0,"t2":1.0,"k1":0.001,"k2":-1.0,"eta":0.5},"entropy_kind":"shannon","s_classes":8}"#,
    );
    let out = calib3d(&["apply", "--params", p(&params), "--data", p(&manifest), "--out", p(&ws.path("sc"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scan") && err.contains("point"), "{err}");
}

#[test]
fn class_count_mismatch_is_rejected() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "calibrated", "2");
    let params = ws.write("v.json", r#"{"method":"logis","params":{"w":[1,1,1],"b":[0,0,0]},"s_classes":3}"#);
    let out = calib3d(&["eval", "--data", p(&manifest), "--params", p(&params), "--report", p(&ws.path("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metac_sidecars_depend_only_on_seed() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "temp-distort", "4");
    let params = ws.write(
        "m.json",
        r#"{"method":"metac","params":{"t":2.0,"eta":0.8},"entropy_kind":"shannon","s_classes":8}"#,
    );
    for (name, seed, threads) in [("a", "7", "1"), ("b", "7", "3"), ("c", "8", "1")] {
        ok(&["--seed", seed, "--threads", threads, "apply", "--params", p(&params), "--data", p(&manifest), "--split", "all", "--out", p(&ws.path(name))]);
    }
    assert_eq!(dir_bytes(&ws.path("a")), dir_bytes(&ws.path("b")));
    assert_ne!(dir_bytes(&ws.path("a")), dir_bytes(&ws.path("c")));
}

#[test]
fn fitting_reduces_ece_and_keeps_miou() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "temp-distort", "5");
    let temps = ws.path("temps.json");
    let summary = ok(&["fit", "--method", "temps", "--data", p(&manifest), "--split", "all", "--epochs", "200", "--out", p(&temps)]);
    assert!(summary["final_nll"].as_f64().unwrap() <= summary["initial_nll"].as_f64().unwrap());

    let uncal = ws.report(&manifest, None, "u.json");
    let cal = ws.report(&manifest, Some(&temps), "c.json");
    assert!(cal["dataset_ece"].as_f64().unwrap() < uncal["dataset_ece"].as_f64().unwrap());
    assert_eq!(cal["miou"], uncal["miou"]);
    assert_eq!(cal["per_class_iou"], uncal["per_class_iou"]);
}

#[test]
fn every_method_fits_and_evaluates() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "depth-distort", "6");
    for method in ["temps", "logis", "diris", "metac", "depts"] {
        let params = ws.path(&format!("{method}.json"));
        let summary = ok(&["fit", "--method", method, "--data", p(&manifest), "--out", p(&params)]);
        assert_eq!(summary["method"], method);
        let report = ws.report(&manifest, Some(&params), &format!("{method}-report.json"));
        let ece = report["dataset_ece"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ece));
    }
}

#[test]
fn eval_writes_reliability_and_depth_profile() {
    let ws = Workspace::new();
    let manifest = ws.synth("d", "depth-distort", "7");
    let (report, csv, svg) = (ws.path("r.json"), ws.path("r.csv"), ws.path("r.svg"));
    ok(&[
        "eval", "--data", p(&manifest), "--split", "all", "--bins", "15", "--report", p(&report),
        "--reliability-csv", p(&csv), "--reliability-svg", p(&svg), "--depth-profile",
    ]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["reliability"].as_array().unwrap().len(), 15);
    assert_eq!(r["depth_profile"].as_array().unwrap().len(), 10);
    assert_eq!(r["n_scans"], 10);
    let csv = fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().count(), 16);
    assert!(csv.starts_with("bin_lower,bin_upper,count,mean_conf,mean_acc,gap"));
    assert!(fs::read_to_string(svg).unwrap().contains("<svg"));

    ok(&["eval", "--data", p(&manifest), "--report", p(&report)]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(r.get("depth_profile").is_none());
}
