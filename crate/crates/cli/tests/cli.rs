use std::path::Path;
use std::process::{Command, Output};

fn nwflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nwflow"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NWFLOW_SEED")
        .output()
        .expect("spawn nwflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_support_samples_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = nwflow(&["generate", "--n", "20", "--out", "g"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let samples = std::fs::read_to_string(dir.path().join("g/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 21);
    assert_eq!(samples.lines().next(), Some("x0,x1"));
    let support = std::fs::read_to_string(dir.path().join("g/support.csv")).unwrap();
    assert_eq!(support.lines().count(), 51);
    let side = json(&dir.path().join("g/generate.json"));
    assert_eq!(side["config"]["task"]["family"], "gmm");
    assert_eq!(side["config"]["m"], 50);
    assert!(side["config"].get("jobs").is_none());
    assert_eq!(side["meta"]["integrator"]["method"], "euler");
}

#[test]
fn jobs_do_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for (j, out) in [("1", "a"), ("3", "b")] {
        let o = nwflow(&["--jobs", j, "generate", "--n", "200", "--rk45", "--out", out], dir.path());
        assert_eq!(code(&o), 0);
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/samples.csv"), read("b/samples.csv"));
    assert_eq!(read("a/support.csv"), read("b/support.csv"));
}

#[test]
fn seed_precedence_flag_file_env() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"seed": 7, "n": 5}"#).unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_nwflow"));
        c.args(args).current_dir(dir.path()).env_remove("NWFLOW_SEED");
        if let Some(v) = env {
            c.env("NWFLOW_SEED", v);
        }
        assert!(c.status().unwrap().success());
        json(&dir.path().join("o/generate.json"))["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&["generate", "--n", "5", "--out", "o"], None), 0);
    assert_eq!(run(&["generate", "--n", "5", "--out", "o"], Some("3")), 3);
    assert_eq!(run(&["--config", "c.json", "generate", "--out", "o"], Some("3")), 7);
    assert_eq!(run(&["--config", "c.json", "generate", "--seed", "9", "--out", "o"], Some("3")), 9);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&nwflow(&["generate", "--sigma-min", "0"], p)), 2);
    assert_eq!(code(&nwflow(&["generate", "--task", "moons", "--d", "3"], p)), 2);
    assert_eq!(code(&nwflow(&["generate", "--task", "nope"], p)), 2);
    assert_eq!(code(&nwflow(&["experiment", "nope"], p)), 2);
    assert_eq!(code(&nwflow(&["experiment", "kde-identity", "--m", "3"], p)), 2);
    assert_eq!(code(&nwflow(&["whiten", "--strength", "0.5"], p)), 2);
    assert_eq!(code(&nwflow(&["generate", "--rtol", "1e-3"], p)), 2);
    std::fs::write(p.join("bad.json"), r#"{"sed": 1}"#).unwrap();
    assert_eq!(code(&nwflow(&["--config", "bad.json", "generate"], p)), 2);
}

#[test]
fn bad_tables_exit_2_and_singular_whitening_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("ragged.csv"), "1,2\n3\n").unwrap();
    assert_eq!(code(&nwflow(&["ingest", "--features", "ragged.csv"], p)), 2);
    std::fs::write(p.join("flat.csv"), "a,b\n1,2\n2,4\n3,6\n4,8\n").unwrap();
    let o = nwflow(&["whiten", "--features", "flat.csv", "--out", "w"], p);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&nwflow(&["whiten", "--features", "flat.csv", "--strength", "0", "--out", "w"], p)), 0);
}

#[test]
fn failed_criterion_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.json"), r#"{"experiment": {"tolerance": 0.0, "points_per_config": 5}}"#).unwrap();
    let o = nwflow(&["--config", "c.json", "experiment", "kde-identity", "--configs", "5", "--out", "r"], p);
    assert_eq!(code(&o), 1);
    let rep = json(&p.join("r/report.json"));
    assert_eq!(rep["pass"], false);
    assert!(rep["criteria"][0]["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn ingest_normalizes_to_binary_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("t.csv"), "u,v\n\n1.5,2\n-3,4e-2\n").unwrap();
    assert_eq!(code(&nwflow(&["ingest", "--features", "t.csv", "--format", "bin", "--out", "b"], p)), 0);
    assert_eq!(code(&nwflow(&["ingest", "--features", "b/table.bin", "--out", "c"], p)), 0);
    let text = std::fs::read_to_string(p.join("c/table.csv")).unwrap();
    assert_eq!(text, "x0,x1\n1.5000000000000000e0,2.0000000000000000e0\n-3.0000000000000000e0,4.0000000000000001e-2\n");
    assert_eq!(json(&p.join("b/ingest.json"))["columns"], serde_json::json!(["u", "v"]));
}

#[test]
fn diag_neff_grid_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = nwflow(&["diag-neff", "--queries", "16", "--out", "d"], dir.path());
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("d/neff.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,h_t,median_neff,q25,q75"));
    assert!(text.contains("\n5.6000000000000005e-1,"));
}
