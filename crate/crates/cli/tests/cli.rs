use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn snomdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snomdp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn small_spec(dir: &Path, methods: &str, seeds: &str) -> PathBuf {
    let text = format!(
        r#"output_dir = "out"
seeds = {seeds}
methods = {methods}

[environment]
kind = "synthetic"
width = 8
height = 8
reward_kernel = {{ family = "rbf", lengthscale = 2.0, variance = 1.0 }}
safety_kernel = {{ family = "rbf", lengthscale = 2.0, variance = 1.0 }}

[agent]
threshold = -1.0
eps_g = 0.05
max_steps = 150
record_sets = true
"#
    );
    let path = dir.join("spec.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_echoes_resolved_defaults() {
    let out = snomdp(&["validate", s(&fixture("synthetic.toml"))]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let echo = String::from_utf8(out.stdout).unwrap();
    for key in ["vi_tolerance", "reward_noise_variance", "scale_is_squared", "[agent.safety_kernel]"] {
        assert!(echo.contains(key), "missing {key} in\n{echo}");
    }
}

#[test]
fn validate_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["synthetic.toml", "terrain.toml"] {
        let first = snomdp(&["validate", s(&fixture(name))]);
        assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
        let echoed = dir.path().join(name);
        fs::write(&echoed, &first.stdout).unwrap();
        let second = snomdp(&["validate", s(&echoed)]);
        assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
        assert_eq!(first.stdout, second.stdout);
    }
}

#[test]
fn unit_discount_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("synthetic.toml"))
        .unwrap()
        .replace("discount = 0.99", "discount = 1.0");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = snomdp(&["validate", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("discount must be < 1"), "{}", stderr(&out));
}

#[test]
fn elevation_without_cell_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("terrain.toml"))
        .unwrap()
        .replace("cell_size = 5.0\n", "")
        .replace("terrain_40x30.asc", s(&fixture("terrain_40x30.asc")));
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = snomdp(&["validate", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("environment.cell_size"), "{}", stderr(&out));
}

#[test]
fn missing_elevation_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("terrain.toml"))
        .unwrap()
        .replace("terrain_40x30.asc", "no_such_dem.asc");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = snomdp(&["run", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_dem.asc"), "{}", stderr(&out));
}

#[test]
fn unknown_method_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_spec(dir.path(), r#"["greedy"]"#, "[1]");
    let out = snomdp(&["validate", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synthetic_fixture_runs_without_unsafe_actions() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("synthetic.toml"))
        .unwrap()
        .replace("seeds = [0, 1, 2, 3, 4]", "seeds = [0]");
    let path = dir.path().join("spec.toml");
    fs::write(&path, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = snomdp(&["run", s(&path), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(table, String::from_utf8(out.stdout).unwrap());
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        assert_eq!(row.split(',').nth(5), Some("0"), "{row}");
    }
}

#[test]
fn reruns_give_identical_summaries_and_collisions_fail() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), r#"["sno_mdp_es2", "safemdp", "oracle"]"#, "[3, 4]");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = snomdp(&["run", s(&spec), "--out", s(&a), "--jobs", "2"]);
    let second = snomdp(&["run", s(&spec), "--out", s(&b)]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert_eq!(
        fs::read(a.join("summary.csv")).unwrap(),
        fs::read(b.join("summary.csv")).unwrap()
    );
    let before = fs::read(a.join("oracle_seed3.ndjson")).unwrap();
    let again = snomdp(&["run", s(&spec), "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("already exists"), "{}", stderr(&again));
    assert_eq!(fs::read(a.join("oracle_seed3.ndjson")).unwrap(), before);
}

#[test]
fn plotdata_normalizes_by_the_oracle_and_keeps_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), r#"["sno_mdp_classic", "oracle"]"#, "[5]");
    let logs = dir.path().join("logs");
    let run = snomdp(&["run", s(&spec), "--out", s(&logs)]);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    let plots = dir.path().join("plots");
    let out = snomdp(&["plotdata", s(&logs), "--out", s(&plots)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let series = fs::read_to_string(plots.join("oracle_seed5.series.csv")).unwrap();
    let rows: Vec<&str> = series.lines().skip(1).collect();
    assert_eq!(rows.len(), 150);
    for row in rows {
        let v: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v <= 1.0 + 1e-9, "{row}");
    }

    let transitions = fs::read_to_string(plots.join("transitions.csv")).unwrap();
    for line in transitions.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let log = fs::read_to_string(logs.join(format!("{}_seed{}.ndjson", cols[0], cols[1]))).unwrap();
        let summary: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
        let expected = summary["t_transition"].as_u64().map_or(String::new(), |t| t.to_string());
        assert_eq!(expected, cols[2], "{line}");
    }
    assert!(plots.join("sno_mdp_classic_seed5.sets.csv").exists());
}

#[test]
fn plotdata_reports_malformed_logs_by_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("oracle_seed1.ndjson");
    fs::write(
        &log,
        "{\"record\":\"header\",\"schema_version\":1,\"method\":\"oracle\",\"seed\":1}\nnot json\n",
    )
    .unwrap();
    let out = snomdp(&["plotdata", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("oracle_seed1.ndjson") && err.contains("line 2"), "{err}");
}

#[test]
fn aborted_runs_exit_one_and_leave_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), r#"["sno_mdp_classic", "oracle"]"#, "[2]");
    let text = fs::read_to_string(&spec).unwrap() + "vi_max_iter = 1\n";
    fs::write(&spec, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = snomdp(&["run", s(&spec), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(out_dir.join("oracle_seed2.ndjson.partial").exists());
    assert!(out_dir.join("summary.csv.partial").exists());
    assert!(!out_dir.join("summary.csv").exists());
}
