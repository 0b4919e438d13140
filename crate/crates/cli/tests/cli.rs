use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"[
  {"id": "rot", "d": 1, "L": 8, "n": 2,
   "weight": {"kind": "rotated-diagonal", "alpha": 0.5, "pieces": 2, "jump": 0.7},
   "signal": {"kind": "random"},
   "b": {"kind": "log-distance"}},
  {"id": "pow", "d": 2, "L": 4, "n": 2,
   "weight": {"kind": "diagonal-power", "exponents": [0.3, 0.7]},
   "signal": {"kind": "multi-spike", "count": 3}}
]"#;

const LINE: &str = r#"{"id": "line", "d": 1, "L": 9, "n": 2,
  "weight": {"kind": "random-log-bounded", "amplitude": 1.0},
  "signal": {"kind": "bump", "center": [0.4], "width": 0.1},
  "b": {"kind": "sawtooth", "period": 0.25}}"#;

fn mwlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwlab")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_to(dir: &Path, name: &str, args: &[&str]) -> Vec<u8> {
    let out = dir.join(name);
    let mut all = args.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    let o = mwlab(&all);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::read(out).unwrap()
}

#[test]
fn weaktype_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let args = ["weaktype", "--config", cfg.as_str(), "--seed", "3"];
    let a = run_to(dir.path(), "a.csv", &args);
    let b = run_to(dir.path(), "b.csv", &args);
    assert_eq!(a, b);
    let one = run_to(dir.path(), "one.csv", &[&args[..], &["--threads", "1"]].concat());
    let four = run_to(dir.path(), "four.csv", &[&args[..], &["--threads", "4"]].concat());
    assert_eq!(one, four);
    assert_eq!(a, one);
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment_id,weight_id,f_id,n,d,L,a1,ainf_sc,lambda,lhs_measure,rhs_bound,ratio,runtime_ms"
    );
    let ids: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert!(ids.contains(&"rot/maximal") && ids.contains(&"pow/maximal"));
}

#[test]
fn seed_changes_random_members() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let a = run_to(dir.path(), "a.csv", &["weaktype", "--config", &cfg, "--seed", "3"]);
    let b = run_to(dir.path(), "b.csv", &["weaktype", "--config", &cfg, "--seed", "4"]);
    assert_ne!(a, b);
}

#[test]
fn line_experiments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "line.json", LINE);
    let czo = String::from_utf8(run_to(dir.path(), "czo.csv", &["czo", "--config", &cfg, "--seed", "1"])).unwrap();
    assert!(czo.lines().skip(1).all(|l| l.starts_with("line/czo,")));
    let comm =
        String::from_utf8(run_to(dir.path(), "comm.csv", &["commutator", "--config", &cfg, "--seed", "1"])).unwrap();
    for variant in ["full/phi", "full/phi-alt", "full/l1", "sparse/l1", "sparse-star/phi"] {
        let prefix = format!("line/{variant},");
        assert!(comm.lines().any(|l| l.starts_with(&prefix)), "{variant}");
    }
}

#[test]
fn czo_rejects_planar_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let o = mwlab(&["czo", "--config", &cfg, "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "bad.json", r#"{"d": 1, "L": 4, "n": 1, "weight": {"kind": "identity"},
        "signal": {"kind": "random", "seed": 1}, "colour": 3}"#);
    let unseeded = write(dir.path(), "unseeded.json", r#"{"d": 1, "L": 4, "n": 1, "weight": {"kind": "identity"},
        "signal": {"kind": "random"}}"#);
    let missing = dir.path().join("absent.json");
    for args in [
        vec!["weaktype", "--config", unknown.as_str()],
        vec!["weaktype", "--config", unseeded.as_str()],
        vec!["weaktype", "--config", missing.to_str().unwrap()],
        vec!["weaktype", "--threads", "0"],
        vec!["frobnicate"],
    ] {
        let o = mwlab(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn selftest_passes() {
    let o = mwlab(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() >= 5 && text.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn sparse_and_orlicz_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let sparse = String::from_utf8(run_to(dir.path(), "s.csv", &["sparse", "--config", &cfg, "--seed", "2"])).unwrap();
    // Three grids for the line member, nine for the planar one.
    assert_eq!(sparse.lines().count(), 1 + 3 + 9);
    assert!(sparse.lines().skip(1).all(|l| l.ends_with(",true")));
    let orlicz = String::from_utf8(run_to(dir.path(), "o.csv", &["orlicz", "--config", &cfg, "--seed", "2"])).unwrap();
    let mut lines = orlicz.lines();
    assert_eq!(lines.next().unwrap(), "experiment_id,grid,level,coord0,coord1,norm_kind,value,residual");
    let kinds: Vec<&str> = lines.map(|l| l.split(',').nth(5).unwrap()).collect();
    assert!(kinds.contains(&"LlogL") && kinds.contains(&"expL"));
}

#[test]
fn json_output_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "line.json", LINE);
    let bytes = run_to(dir.path(), "r.json", &["weaktype", "--config", &cfg, "--seed", "1", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert!(!v["rows"].as_array().unwrap().is_empty());
    assert_eq!(v["summaries"][0]["experiment_id"], "line/maximal");
    let bytes = run_to(dir.path(), "c.json", &["constants", "--config", &cfg, "--seed", "1", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert!(v[0]["constants"]["a1"].as_f64().unwrap() >= 1.0);
}
