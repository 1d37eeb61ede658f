use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mlstab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlstab")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

/// `der(x) + k x = 0`, a first-order decay for positive `k`.
fn first_order(dir: &Path, k: f64) {
    write(dir, "model.json", &format!(r#"{{"partition":{{"n":1,"m":0,"p":0,"q":0,"names":["der(x)","x"]}},"phi":[[1,{k}]],"s":[[1,0],[0,1]]}}"#));
}

#[test]
fn help_and_parse_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&mlstab(dir.path(), &["--help"])), 0);
    assert_eq!(code(&mlstab(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&mlstab(dir.path(), &["eig"])), 1);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = mlstab(dir.path(), &["--format", "json", "info", "nope.json"]);
    assert_eq!(code(&out), 1);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
    assert_eq!(err["exit_code"], 1);
}

#[test]
fn missing_output_directory_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = mlstab(dir.path(), &["block", "pll", "-o", "no/such/dir/pll.json"]);
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("no").exists());
}

#[test]
fn pll_spectrum_through_the_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&mlstab(d, &["block", "pll", "-o", "pll.json"])), 0);
    write(
        d,
        "point.json",
        r#"{"names": ["z1", "z2", "z3", "u1", "u2", "a1", "a2"],
            "values": [0.997564052781209, -0.06975643768663595, 0, 325.2059, 22.7406, 0.997564052781209, -0.06975643768663595]}"#,
    );
    assert_eq!(code(&mlstab(d, &["linearize", "pll.json", "point.json", "-o", "ldss.json"])), 0);
    let out = mlstab(d, &["--format", "json", "eig", "ldss.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["infinite_count"], 2);
    let re: Vec<f64> = v["finite"].as_array().unwrap().iter().map(|z| z[0].as_f64().unwrap()).collect();
    assert_eq!(re.len(), 3);
    for want in [0.0, -20.6046, -142.3954] {
        assert!(re.iter().any(|x| (x - want).abs() < 5e-3), "{want} not in {re:?}");
    }
    assert_eq!(v["verdict"]["stable"], true);

    fs::write(d.join("eig.json"), &out.stdout).unwrap();
    write(d, "ref.json", "[[-20.6046, 0], [-142.3954, 0], [0, 0]]");
    let cmp = mlstab(d, &["--format", "json", "compare", "eig.json", "ref.json"]);
    assert_eq!(code(&cmp), 0);
    let rep = json(&cmp);
    assert!(rep["pairs"].as_array().unwrap().iter().all(|p| p["within_tol"] == true));
    assert_eq!(rep["unmatched_a"].as_array().unwrap().len(), 0);
}

#[test]
fn unstable_system_sets_exit_code() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    first_order(d, -1.0);
    write(d, "zero.json", r#"{"names":["x"],"values":[0]}"#);
    assert_eq!(code(&mlstab(d, &["linearize", "model.json", "zero.json", "-o", "ldss.json"])), 0);
    let out = mlstab(d, &["eig", "ldss.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict: unstable"));
}

#[test]
fn decay_simulation_matches_exponential() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    first_order(d, 1.0);
    write(d, "x0.json", r#"{"names":["x"],"values":[1]}"#);
    let out = mlstab(d, &["simulate", "model.json", "x0.json", "--t-end", "1"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "x").unwrap();
    let last: Vec<f64> = lines.last().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!((last[0] - 1.0).abs() < 1e-12);
    assert!((last[col] - (-1.0f64).exp()).abs() < 1e-6, "{}", last[col]);
}

#[test]
fn random_models_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let a = mlstab(d, &["--seed", "7", "random"]);
    let b = mlstab(d, &["--seed", "7", "random"]);
    let c = mlstab(d, &["--seed", "8", "random"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn compose_links_blocks() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    first_order(d, 1.0);
    write(
        d,
        "gain.json",
        r#"{"partition":{"n":0,"m":1,"p":1,"q":0,"names":["u","y"]},"phi":[[1,-2]],"s":[[0,1],[1,0]]}"#,
    );
    let out = mlstab(d, &["--format", "json", "compose", "model.json", "gain.json", "--link", "x:u"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(d.join("c.json"), &out.stdout).unwrap();
    let info = json(&mlstab(d, &["--format", "json", "info", "c.json"]));
    assert_eq!(info["n"], 1);
    assert_eq!(info["m"], 0);
    assert_eq!(info["q"], 1);
    let bad = mlstab(d, &["compose", "model.json", "gain.json", "--link", "x:nope"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn bench_writes_identical_outputs_on_rerun() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    for run in ["a", "b"] {
        let out = mlstab(d, &["--format", "json", "bench", "3bus", "--out-dir", run, "-o", &format!("{run}.json")]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        for f in ["imti.csv", "ldss.csv", "nti.csv", "report.json"] {
            assert!(d.join(run).join(f).is_file(), "{run}/{f}");
        }
    }
    assert_eq!(fs::read(d.join("a/report.json")).unwrap(), fs::read(d.join("b/report.json")).unwrap());
    let report: Value = serde_json::from_slice(&fs::read(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["rank_e"], 26);
    assert_eq!(report["report"]["verdict"]["stable"], true);
}
