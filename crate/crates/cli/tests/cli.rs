use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TWO_POINT: &str = r#"{"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"two_point","up":1.0,"p_up":0.05,"down":-1.0}}"#;

fn kbrw(dir: &Path, args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kbrw"));
    cmd.current_dir(dir).args(args).env_remove("KBRW_WORKERS");
    if let Some(w) = workers {
        cmd.env("KBRW_WORKERS", w);
    }
    cmd.output().expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tp.json"), TWO_POINT).unwrap();
    dir
}

fn summary(dir: &Path, out: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join(out).join("summary.json")).unwrap()).unwrap()
}

#[test]
fn analyze_two_point_roots() {
    let d = setup();
    let o = kbrw(d.path(), &["analyze-model", "--model", "tp.json", "--out", "a"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(d.path(), "a");
    // ψ(ϱ) = log(2(0.05 e^ϱ + 0.95 e^{−ϱ})) vanishes at the roots of 0.1y² − y + 1.9
    let disc = (1.0f64 - 4.0 * 0.1 * 1.9).sqrt();
    let (lo, hi) = (((1.0 - disc) / 0.2f64).ln(), ((1.0 + disc) / 0.2f64).ln());
    let a = &s["result"]["analytics"];
    assert!((a["rho_minus"].as_f64().unwrap() - lo).abs() < 1e-9);
    assert!((a["rho_plus"].as_f64().unwrap() - hi).abs() < 1e-9);
    assert_eq!(a["regime"], "subcritical");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("a/MANIFEST.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn schema_errors_exit_2_with_path() {
    let d = setup();
    fs::write(d.path().join("bad.json"), TWO_POINT.replace("0.05", "\"x\"")).unwrap();
    let o = kbrw(d.path(), &["analyze-model", "--model", "bad.json"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("x.p_up"));
    let cfg = format!(
        r#"{{"model":{TWO_POINT},"command":{{"name":"simulate","x":1,"replicas":"ten"}},"seed":1,"output_dir":"o"}}"#
    );
    fs::write(d.path().join("cfg.json"), cfg).unwrap();
    let o = kbrw(d.path(), &["run", "--config", "cfg.json"], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`command`") && err.contains("\"ten\""), "{err}");
    let o = kbrw(d.path(), &["simulate", "--model", "tp.json", "--x", "1", "--levels", "3,2", "--replicas", "5"], None);
    assert_eq!(o.status.code(), Some(2));
    let o = kbrw(d.path(), &["analyze-model", "--model", "tp.json"], Some("zero"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rerun_is_byte_identical_across_workers() {
    let d = setup();
    let args = |out: &'static str| {
        [
            "simulate",
            "--model",
            "tp.json",
            "--x",
            "1",
            "--levels",
            "2,4",
            "--replicas",
            "3000",
            "--seed",
            "9",
            "--out",
            out,
        ]
    };
    for (out, w) in [("r1", "1"), ("r2", "1"), ("r8", "8")] {
        let o = kbrw(d.path(), &args(out), Some(w));
        assert!(o.status.success());
    }
    let read = |p: &str| fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("r1/summary.json"), read("r2/summary.json"));
    assert_eq!(read("r1/summary.json"), read("r8/summary.json"));
    assert_eq!(read("r1/records.csv"), read("r8/records.csv"));
    let o = kbrw(d.path(), &["report", "--run-dir", ".", "--out", "rep"], None);
    assert!(o.status.success());
    let report = fs::read_to_string(d.path().join("rep/report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("12,") && l.contains(",pass,")), "{report}");
    assert!(report.lines().any(|l| l.starts_with("1,") && l.contains(",insufficient,")), "{report}");
}

#[test]
fn cap_dominated_run_exits_3() {
    let d = setup();
    let o = kbrw(
        d.path(),
        &["simulate", "--model", "tp.json", "--x", "1", "--replicas", "100", "--caps", "1,1", "--out", "c"],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
    let s = summary(d.path(), "c");
    assert!(s["truncated_fraction"].as_f64().unwrap() > 0.5);
}

#[test]
fn simulate_then_estimate() {
    let d = setup();
    let o = kbrw(
        d.path(),
        &[
            "simulate",
            "--model",
            "tp.json",
            "--x",
            "3",
            "--replicas",
            "20000",
            "--survival-curve",
            "4,8,16,32,64",
            "--out",
            "s",
        ],
        None,
    );
    assert!(o.status.success());
    let records = fs::read_to_string(d.path().join("s/records.csv")).unwrap();
    assert_eq!(records.lines().count(), 20_001);
    assert!(d.path().join("s/survival_curve.csv").exists());
    let o = kbrw(
        d.path(),
        &[
            "estimate",
            "--model",
            "tp.json",
            "--records",
            "s/records.csv",
            "--range",
            "4,64",
            "--grid",
            "4,8,16,32,64",
            "--out",
            "e",
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(d.path(), "e");
    assert_eq!(s["result"]["mode"], "subcritical_slope");
    assert!(s["result"]["z_fit"]["fitted"]["value"].as_f64().unwrap() < 0.0);
    assert!(fs::read_to_string(d.path().join("e/tail.csv")).unwrap().starts_with("n,survival,normalized"));
}

#[test]
fn oracle_and_spine_outputs() {
    let d = setup();
    let o = kbrw(
        d.path(),
        &["oracle", "--model", "tp.json", "--x", "1", "--tree-functional", r#"{"type":"count","n":3}"#, "--out", "o"],
        None,
    );
    assert!(o.status.success());
    assert_eq!(summary(d.path(), "o")["result"]["value"], 8.0);
    let o = kbrw(
        d.path(),
        &["spine", "--model", "tp.json", "--op", "eh", "--x", "1", "--t", "3", "--replicas", "2000", "--out", "sp"],
        None,
    );
    assert!(o.status.success());
    let r = &summary(d.path(), "sp")["result"];
    for key in ["estimate", "stderr", "effective_sample_size", "truncated_count"] {
        assert!(!r[key].is_null(), "{key}");
    }
}
