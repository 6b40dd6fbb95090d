use std::path::Path;
use std::process::Command;

fn theorylab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_theorylab")).args(args).output().expect("spawn theorylab")
}

fn verdict(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("verdict.json")).expect("verdict.json");
    serde_json::from_str(&text).expect("valid json")
}

#[test]
fn passing_run_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = theorylab(&[
        "convergence", "--env", "diamond", "--grid", "objective=fm", "--grid", "T=100,1000,10000",
        "--seeds", "3", "--out", out, "--seed", "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let v = verdict(dir.path());
    assert_eq!(v["experiment"], "convergence");
    assert_eq!(v["passed"], true);
    assert!(!v["checks"].as_array().unwrap().is_empty());
    assert!(dir.path().join("convergence_summary.csv").exists());
    assert!(dir.path().join("convergence_mingrad.svg").exists());
}

#[test]
fn failed_assertion_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // a vanishing step size cannot reduce the gradient norm
    let o = theorylab(&[
        "convergence", "--grid", "objective=fm", "--grid", "T=100,200,400", "--grid", "eta0=1e-12",
        "--seeds", "2", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(verdict(dir.path())["passed"], false);
}

#[test]
fn bad_environment_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = theorylab(&["order", "--env", "torus", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("verdict.json").exists());
}

#[test]
fn missing_dag_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = theorylab(&["audit", "--env", "file:/nonexistent/dag.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_grid_is_rejected_by_the_parser() {
    let o = theorylab(&["order", "--grid", "novalue"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("KEY=v1"));
}

#[test]
fn csv_only_skips_svg() {
    let dir = tempfile::tempdir().unwrap();
    let o = theorylab(&[
        "error_accum", "--grid", "length=1,2,3,4,5,6", "--grid", "draws=50", "--formats", "csv",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let svgs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 0);
    assert!(dir.path().join("verdict.json").exists());
}

#[test]
fn same_seed_gives_identical_tables() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = theorylab(&[
            "sample_complexity", "--grid", "study=eps", "--seeds", "4", "--seed", "11", "--formats", "csv",
            "--out", d.path().to_str().unwrap(),
        ]);
        assert!(o.status.code().is_some_and(|c| c != 1));
    }
    let name = "sample_complexity_n_vs_eps.csv";
    assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
}
