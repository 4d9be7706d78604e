use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exitdpp::dp::io::{read_binary, write_binary};
use exitdpp::ProblemSpec;

const REFERENCE: &str = r#"
[horizon]
T = 10.0

[domain]
kind = "box"
lo = [-1.0]
hi = [1.0]

[coefficients]
b = "0"
sigma = "1"
f = "1"
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_exitdpp"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn reference(extra: &str) -> String {
    format!("[run]\nseed = 11\n{REFERENCE}\n{extra}")
}

/// Small budgets: 101 nodes, 2000 paths.
const SMALL: &str = "[grid]\nnodes = [101]\nslices = 100\n[monte_carlo]\nn_steps = 2000\nn_paths = 2000\n";

#[test]
fn check_accepts_valid_problem() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference(""), &["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("valid"));
}

#[test]
fn check_rejects_negative_reward() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference("").replace("f = \"1\"", "f = \"-1\""), &["check"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("f negative"));
}

#[test]
fn missing_horizon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reference("").replace("[horizon]\nT = 10.0\n", "");
    let o = run(dir.path(), &cfg, &["check"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizon"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference("[grid]\nnode = [11]\n"), &["check"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("node"));
}

#[test]
fn problem_file_is_resolved_next_to_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("problem.toml"), REFERENCE).unwrap();
    let o = run(dir.path(), "[run]\nseed = 1\nproblem = \"problem.toml\"\n", &["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

fn load_grid(dir: &Path, spec: &ProblemSpec) -> exitdpp::ValueGrid {
    read_binary(File::open(dir.join("out/grid.bin")).unwrap(), spec).unwrap()
}

#[test]
fn solve_with_zero_reward_writes_zero_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reference(SMALL).replace("f = \"1\"", "f = \"0\"");
    let o = run(dir.path(), &cfg, &["solve"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let spec = ProblemSpec::from_toml_str(&REFERENCE.replace("f = \"1\"", "f = \"0\"")).unwrap();
    let grid = load_grid(dir.path(), &spec);
    assert!(grid.values.iter().all(|&v| v == 0.0));
    let csv = fs::read_to_string(dir.path().join("out/grid.csv")).unwrap();
    assert!(csv.lines().count() > 100);
    assert!(dir.path().join("out/meta.json").exists());
}

#[test]
fn solve_reference_value_at_origin() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference("[grid]\ndx = 0.005\n"), &["solve"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/solve.json")).unwrap()).unwrap();
    let v = summary["query"]["v"].as_f64().unwrap();
    assert!((v - 1.0).abs() < 0.02, "v(0,0) = {v}");
    assert!(summary["cfl_margin"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["spec_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn solve_with_cfl_violation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference("[grid]\nnodes = [201]\nn_steps = 10\n"), &["solve"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("cfl"), "{}", stderr(&o));
}

#[test]
fn estimate_prints_a_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference(SMALL), &["estimate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    let mean: f64 = row[0].parse().unwrap();
    let se: f64 = row[1].parse().unwrap();
    assert!((mean - 1.0).abs() < 3.0 * se + 0.03, "{mean} ± {se}");
    assert_eq!(row[2], "2000");
}

#[test]
fn estimate_outside_domain_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference(&format!("{SMALL}[query]\nx = [1.5]\n")), &["estimate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("0.0,0.0,"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(dir.path(), &reference(SMALL), &["estimate"]);
    let b = run(dir.path(), &reference(SMALL), &["estimate", "--seed", "12"]);
    let c = run(dir.path(), &reference(SMALL), &["estimate", "--seed", "11"]);
    assert_ne!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a), stdout(&c));
}

#[test]
fn simulate_exports_paths_until_exit() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference(&format!("{SMALL}[simulate]\nn_paths = 3\n")), &["simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/paths.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("path,"));
    let ids: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    for id in ["0", "1", "2"] {
        let n = ids.iter().filter(|&&i| i == id).count();
        assert!(n > 1 && n < 2001, "path {id} has {n} rows");
    }
}

#[test]
fn cover_dump_lists_cells() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &reference("[cover]\nradius = 0.5\n"), &["cover"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/cover.json")).unwrap()).unwrap();
    assert!(!dump["cover"]["cells"].as_array().unwrap().is_empty());
}

fn verify_config(extra: &str) -> String {
    reference(&format!("{SMALL}[verify.stitch]\nradius = 0.3\n{extra}"))
}

#[test]
fn verify_reference_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &verify_config(""), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["dpp"]["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn verify_with_constant_rule_only_passes() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[verify]\nrules = [{ kind = \"constant\", s = 0.0 }]\n";
    let o = run(dir.path(), &reference(&format!("{SMALL}{extra}[verify.stitch]\nenabled = false\n")), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

fn corrupted(dir: &Path, factor: f64) -> PathBuf {
    let o = run(dir, &reference(SMALL), &["solve"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let spec = ProblemSpec::from_toml_str(REFERENCE).unwrap();
    let mut grid = load_grid(dir, &spec);
    grid.values.iter_mut().for_each(|v| *v *= factor);
    let path = dir.join("corrupt.bin");
    write_binary(&grid, File::create(&path).unwrap()).unwrap();
    path
}

fn verify_corrupted(factor: f64) -> serde_json::Value {
    let dir = tempfile::tempdir().unwrap();
    let path = corrupted(dir.path(), factor);
    let extra = format!("[verify]\ngrid_file = {:?}\n[verify.stitch]\nenabled = false\n", path.to_str().unwrap());
    let o = run(dir.path(), &reference(&format!("{SMALL}{extra}")), &["verify"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap()
}

#[test]
fn inflated_grid_fails_attainment() {
    let report = verify_corrupted(2.0);
    assert_eq!(report["dpp"]["flag_attained"], false);
    assert_eq!(report["passed"], false);
}

#[test]
fn deflated_grid_fails_upper_bound() {
    let report = verify_corrupted(0.5);
    assert_eq!(report["dpp"]["flag_upper"], false);
}

#[test]
fn grid_from_other_problem_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = corrupted(dir.path(), 1.0);
    let cfg = reference(&format!("{SMALL}[verify]\ngrid_file = {:?}\n", path.to_str().unwrap()))
        .replace("f = \"1\"", "f = \"2\"");
    let o = run(dir.path(), &cfg, &["verify"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
}

#[test]
fn report_does_not_depend_on_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = verify_config("");
    let one = run(dir.path(), &cfg, &["verify", "--workers", "1"]);
    assert_eq!(one.status.code(), Some(0), "{}", stderr(&one));
    let a = fs::read(dir.path().join("out/report.json")).unwrap();
    let eight = run(dir.path(), &cfg, &["verify", "--workers", "8"]);
    assert_eq!(eight.status.code(), Some(0));
    let b = fs::read(dir.path().join("out/report.json")).unwrap();
    assert_eq!(a, b);
}
