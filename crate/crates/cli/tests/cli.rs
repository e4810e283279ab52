use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tlrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlrecon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tlrecon(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tlrecon(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_commands_chain() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    let p = tmp.path().join("p");
    let r = tmp.path().join("r");
    let lib = tmp.path().join("lib.json");
    let dm = tmp.path().join("dm.json");
    let pi = tmp.path().join("pi.json");
    let labels = tmp.path().join("labels.csv");
    let report = tmp.path().join("report.json");
    fs::write(&lib, r#"{"poly_order": 1, "dim": 2}"#).unwrap();
    fs::write(&dm, r#"{"iters": 30, "iters_phase1": 10}"#).unwrap();
    fs::write(&pi, r#"{"iters": 10, "iters_1": 5}"#).unwrap();

    ok(&["generate", "--system", "linear2d", "--n", "2000", "--seed", "1", "--out", s(&d)]);
    assert!(d.join("data.csv").exists() && d.join("data.times.csv").exists());
    ok(&["segment", "--in", s(&d.join("data.csv")), "--clusters", "4", "--out", s(&p)]);
    ok(&["fit-dm", "--pieces", s(&p), "--library", s(&lib), "--config", s(&dm), "--out", s(&r)]);
    for f in ["theta.json", "dm_history.csv", "net_00.json", "net_03.json"] {
        assert!(r.join(f).exists(), "{f}");
    }
    let theta0 = r.join("theta.json");
    ok(&["fit-pi", "--pieces", s(&p), "--library", s(&lib), "--theta0", s(&theta0), "--config", s(&pi), "--out", s(&r)]);
    let theta = r.join("theta_pi.json");
    // library inferred from feature names
    ok(&["reconstruct", "--pieces", s(&p), "--theta", s(&theta), "--grid", "200", "--out", s(&labels)]);
    let text = fs::read_to_string(&labels).unwrap();
    assert_eq!(text.lines().next(), Some("piece,index,t_hat"));
    assert_eq!(text.lines().count(), 2001);
    let stdout = ok(&[
        "evaluate", "--labels", s(&labels), "--truth", s(&d.join("data.times.csv")), "--report", s(&report),
        "--system", "linear2d", "--theta", s(&theta), "--pieces", s(&p), "--grid", "200",
    ]);
    assert!(stdout.contains("e_time") && stdout.contains("e_para"));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rep["e_time"].as_f64().unwrap().is_finite());
    assert_eq!(rep["abs_errors"].as_array().unwrap().len(), 2000);

    // second fit-dm into the same place is refused without --force
    assert_eq!(code(&["fit-dm", "--pieces", s(&p), "--library", s(&lib), "--config", s(&dm), "--out", s(&r)]), 2);
    ok(&["fit-dm", "--pieces", s(&p), "--library", s(&lib), "--config", s(&dm), "--out", s(&r), "--force"]);
    assert_eq!(code(&["generate", "--system", "linear2d", "--n", "100", "--out", s(&d)]), 2);
}

#[test]
fn generate_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let read = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        ok(&["generate", "--system", "cubic2d", "--n", "300", "--dist", "truncnormal", "--seed", seed, "--out", s(&dir)]);
        fs::read(dir.join("data.csv")).unwrap()
    };
    let a = read("a", "7");
    assert_eq!(a, read("b", "7"));
    assert_ne!(a, read("c", "8"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&["generate", "--system", "nope", "--out", s(&tmp.path().join("x"))]), 2);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(code(&["run", "--config", s(&cfg)]), 2);
    assert_eq!(code(&["landscape", "--system", "lorenz", "--i", "0,1", "--j", "1,0", "--out", s(&tmp.path().join("l.csv"))]), 2);
    assert_eq!(code(&["plot", "--run", s(tmp.path())]), 2);
    // too few samples for eight contiguous pieces
    let d = tmp.path().join("d");
    ok(&["generate", "--system", "linear2d", "--n", "80", "--seed", "3", "--out", s(&d)]);
    let c = code(&["segment", "--in", s(&d.join("data.csv")), "--clusters", "8", "--out", s(&tmp.path().join("p"))]);
    assert_eq!(c, 4);
}

#[test]
fn landscape_grid() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("l.csv");
    ok(&[
        "landscape", "--system", "cubic2d", "--i", "0,1", "--j", "1,0", "--range", "-3,3", "--res", "5", "--n", "200",
        "--out", s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert_eq!(code(&["landscape", "--system", "cubic2d", "--i", "0,2", "--j", "1,0", "--out", s(&tmp.path().join("m.csv"))]), 2);
}

#[test]
fn presets_and_tiny_run() {
    let names = ok(&["presets"]);
    assert!(names.lines().any(|l| l == "cubic2d-desk"));
    let shown = ok(&["presets", "--show", "linear2d-desk"]);
    let mut cfg: serde_json::Value = serde_json::from_str(&shown).unwrap();
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    cfg["data"]["n"] = 1500.into();
    cfg["segmentation"]["clusters"] = 4.into();
    cfg["dm"]["iters"] = 20.into();
    cfg["dm"]["iters_phase1"] = 10.into();
    cfg["pi"]["iters"] = 10.into();
    cfg["pi"]["iters_1"] = 5.into();
    cfg["eval_grid"] = 200.into();
    let path = tmp.path().join("cfg.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    ok(&["run", "--config", s(&path), "--out", s(&run)]);
    assert!(run.join("report.json").exists());
    let listed = ok(&["plot", "--run", s(&run)]);
    assert!(listed.contains("trajectory.svg"));
    assert_eq!(code(&["run", "--config", s(&path), "--out", s(&run)]), 2);
    ok(&["run", "--config", s(&path), "--out", s(&run), "--force"]);
    assert_eq!(code(&["presets", "--show", "nope"]), 2);
}
