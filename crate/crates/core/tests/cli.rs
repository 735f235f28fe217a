use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hda() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hda"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "task": {"mode": "uda", "generator": {"kind": "blobs", "n_per_domain": 30, "num_classes": 2, "d_signal": 2, "d_nuisance": 2, "domain_offset": 3.0, "noise_std": 1.0}, "seed": 0},
  "model": {"hidden": 6, "M": 2},
  "optim": {"lr": 0.05, "epochs": 2, "batch_size": 16},
  "seed": 0
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn selfcheck_passes() {
    let o = hda().arg("selfcheck").output().unwrap();
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("selfcheck: "), "{last}");
    let (passed, total) = last["selfcheck: ".len()..]
        .split_once(' ')
        .unwrap()
        .0
        .split_once('/')
        .unwrap();
    assert_eq!(passed, total);
    assert!(!out.contains("FAIL"));
}

#[test]
fn missing_config_is_usage_error() {
    let o = hda()
        .args(["run", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("config.json"));
}

#[test]
fn unknown_flag_prints_usage() {
    let o = hda().args(["run", "--colour", "red"]).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    let o = hda().output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn help_exits_zero() {
    let o = hda().arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    for sub in ["run", "sweep", "gen-data", "plot", "selfcheck"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn bad_method_and_bad_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = hda()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--method", "dann"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, TINY.replace("\"M\"", "\"heads\"")).unwrap();
    let o = hda().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("heads"), "{}", stderr(&o));
}

fn summary_without_clock(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

#[test]
fn repeated_run_gives_identical_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let go = || {
        let o = hda()
            .args(["run", "--config"])
            .arg(configs().join("default.json"))
            .args(["--seed", "7", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            summary_without_clock(&out.join("summary.json")),
            fs::read(out.join("metrics.csv")).unwrap(),
        )
    };
    let (s1, m1) = go();
    let (s2, m2) = go();
    assert_eq!(s1, s2);
    assert_eq!(m1, m2);
    assert_eq!(s1["config"]["seed"], 7);
    assert_eq!(s1["status"], "ok");
}

#[test]
fn out_dir_defaults_to_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = hda()
        .env("HDA_OUT_DIR", dir.path())
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--method", "source_only", "--seed", "4"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("source_only_seed4");
    assert!(run.join("metrics.csv").is_file());
    assert!(run.join("summary.json").is_file());
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.json");
    fs::write(&cfg, TINY.replace("\"lr\": 0.05", "\"lr\": 1e300")).unwrap();
    let out = dir.path().join("out");
    let o = hda()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let v = summary_without_clock(&out.join("summary.json"));
    assert!(v["status"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = hda()
        .args(["gen-data", "--spec"])
        .arg(configs().join("spec_moons.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(files.len(), 3);
    for f in &files {
        let ds = hda::data::import_csv::<f64>(Path::new(f), "x").unwrap();
        assert_eq!(ds.dim(), 2);
        assert!(!ds.is_empty());
    }
    let o = hda()
        .args(["gen-data", "--spec", "/nonexistent.json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn plot_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = hda()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let svg = dir.path().join("svg");
    let o = hda()
        .args(["plot", "--metrics"])
        .arg(run.join("metrics.csv"))
        .arg("--out")
        .arg(&svg)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["losses", "cosine", "kurtosis", "heuristic_ranges", "probes"] {
        let s = fs::read_to_string(svg.join(format!("{name}.svg"))).unwrap();
        assert!(s.starts_with("<?xml") && s.contains("<polyline"));
    }
    let o = hda()
        .args(["plot", "--metrics", "/nonexistent.csv", "--out"])
        .arg(&svg)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    let sweep = dir.path().join("sweep");
    let o = hda()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--m", "1,2"])
        .arg("--out")
        .arg(&sweep)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let table = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}
