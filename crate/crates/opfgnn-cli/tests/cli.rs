//! End-to-end runs of the compiled binary: the pipeline DAG on a small
//! fixture, the exit-code contract, and output reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const PAIR: &str = "\
function mpc = pair
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0   0  0  0  1  1.0  0  135  1  1.06  0.94;
    2  1  30  8  0  0  1  1.0  0  135  1  1.05  0.95;
];
mpc.gen = [ 1  35  0  60  -40  1.0  100  1  80  0; ];
mpc.branch = [ 1  2  0.02  0.1  0.02  40  0  0  0  0  1  -25  25; ];
mpc.gencost = [ 2  0  0  3  0.05  12  0; ];
";

/// Small-network config so train/solve finish in seconds.
const QUICK_CONFIG: &str = "\
[gnn]
layers = 2
taps = 2
width = 4
seed = 5

[train]
epochs = 3
batch_size = 4
learning_rate = 1e-3
seed = 17
validation_fraction = 0.25

[solve]
max_iters = 2000
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_opfgnn"))
}

fn case30_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases/case30.m")
}

/// Fresh per-test scratch directory seeded with the fixture case.
struct Scratch {
    root: PathBuf,
}

impl Scratch {
    fn new(tag: &str) -> Self {
        let root =
            std::env::temp_dir().join(format!("opfgnn-cli-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        Self { root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, body: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, body).unwrap();
        path
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.root);
    }
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().unwrap();
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    output
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_has_run_manifest(dir: &Path) {
    let manifest = dir.join("run_manifest.json");
    assert!(manifest.is_file(), "missing run manifest in {}", dir.display());
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert!(parsed["command"].is_string());
    assert!(parsed["inputs"].as_array().is_some_and(|a| !a.is_empty()));
    assert!(parsed["tool_version"].is_string());
}

#[test]
fn parse_reports_the_case_dimensions() {
    let output = run_ok(bin().arg("parse").arg(case30_path()));
    let stdout = stdout_of(&output);
    assert!(stdout.contains("30 buses"), "{stdout}");
    assert!(stdout.contains("6 generators"), "{stdout}");
    assert!(stdout.contains("41 branches"), "{stdout}");
}

#[test]
fn parse_writes_the_summary_json() {
    let scratch = Scratch::new("parse-json");
    let json_path = scratch.path("summary.json");
    run_ok(bin().arg("parse").arg(case30_path()).arg("--json-out").arg(&json_path));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(summary["buses"], 30);
    assert_eq!(summary["generators"], 6);
    assert_eq!(summary["branches"], 41);
    assert_eq!(summary["base_mva"], 100.0);
}

#[test]
fn parse_rejects_a_malformed_file() {
    let scratch = Scratch::new("parse-bad");
    let path = scratch.write("broken.m", "function mpc = broken\nmpc.baseMVA = 100;\n");
    let output = bin().arg("parse").arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = stderr_of(&output);
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert_eq!(stderr.trim().lines().count(), 1, "diagnostic must be one line: {stderr}");
}

#[test]
fn graph_reports_edges_and_writes_the_edge_list() {
    let scratch = Scratch::new("graph");
    let edges = scratch.path("edges.csv");
    let output = run_ok(
        bin()
            .arg("graph")
            .arg(case30_path())
            .args(["--alpha", "5", "--beta", "0.01"])
            .arg("--edges-out")
            .arg(&edges),
    );
    let stdout = stdout_of(&output);
    assert!(stdout.contains("edges kept"), "{stdout}");
    assert!(stdout.contains("spectral radius"), "{stdout}");
    let body = fs::read_to_string(&edges).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("from_bus,to_bus,weight"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty(), "edge list is empty");
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 3, "bad edge row {row:?}");
        let weight: f64 = fields[2].parse().unwrap();
        assert!(weight > 0.0, "non-positive weight in {row:?}");
    }
}

#[test]
fn sample_writes_a_loadable_dataset_with_manifest() {
    let scratch = Scratch::new("sample");
    let out = scratch.path("data");
    run_ok(
        bin()
            .arg("sample")
            .arg(case30_path())
            .args(["--n", "4", "--seed", "7"])
            .arg("--out")
            .arg(&out),
    );
    assert_has_run_manifest(&out);
    let dataset = opfgnn::dataset::load_dataset(&out).unwrap();
    assert_eq!(dataset.samples.len(), 4);
    assert_eq!(dataset.case_name, "case30");
    assert_eq!(dataset.seed, 7);
}

#[test]
fn sample_runs_reproduce_bit_exactly() {
    let scratch = Scratch::new("sample-repro");
    for dir in ["a", "b"] {
        run_ok(
            bin()
                .arg("sample")
                .arg(case30_path())
                .args(["--n", "3", "--seed", "42"])
                .arg("--out")
                .arg(scratch.path(dir)),
        );
    }
    for file in ["samples.csv", "manifest.json"] {
        let a = fs::read(scratch.path("a").join(file)).unwrap();
        let b = fs::read(scratch.path("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn zero_samples_is_a_usage_error() {
    let scratch = Scratch::new("sample-zero");
    let output = bin()
        .arg("sample")
        .arg(case30_path())
        .args(["--n", "0", "--seed", "1"])
        .arg("--out")
        .arg(scratch.path("data"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("--n"), "{}", stderr_of(&output));
}

#[test]
fn unknown_flags_are_a_usage_error() {
    let output = bin().arg("parse").arg(case30_path()).arg("--frobnicate").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

/// sample -> train -> solve -> eval -> check on the 2-bus fixture, asserting
/// each stage's artifacts exist and compose.
#[test]
fn pipeline_stages_compose_on_the_pair_fixture() {
    let scratch = Scratch::new("pipeline");
    let case = scratch.write("pair.m", PAIR);
    let config = scratch.write("config.toml", QUICK_CONFIG);
    let data = scratch.path("data");
    let trained = scratch.path("trained");
    let solved = scratch.path("solved");
    let evaled = scratch.path("evaled");

    run_ok(
        bin()
            .arg("sample")
            .arg(&case)
            .args(["--n", "8", "--seed", "3"])
            .arg("--out")
            .arg(&data),
    );
    run_ok(
        bin()
            .arg("train")
            .arg(&case)
            .arg("--data")
            .arg(&data)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&trained),
    );
    assert_has_run_manifest(&trained);
    assert!(trained.join("checkpoint.json").is_file());
    let history = fs::read_to_string(trained.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_violation_rate,seconds"));
    assert_eq!(history.trim().lines().count(), 1 + 3, "expected 3 epoch rows:\n{history}");

    run_ok(
        bin()
            .arg("solve")
            .arg(&case)
            .arg("--data")
            .arg(&data)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&solved),
    );
    assert_has_run_manifest(&solved);
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(solved.join("results.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    for row in &rows {
        assert_eq!(row["converged"], true, "baseline failed on an easy sample: {row}");
    }

    let eval_output = run_ok(
        bin()
            .arg("eval")
            .arg(&case)
            .arg("--checkpoint")
            .arg(trained.join("checkpoint.json"))
            .arg("--data")
            .arg(&data)
            .arg("--baseline")
            .arg(&solved)
            .arg("--out")
            .arg(&evaled),
    );
    assert_has_run_manifest(&evaled);
    assert!(stdout_of(&eval_output).contains("mean cost"), "{}", stdout_of(&eval_output));
    let aggregate: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(evaled.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(aggregate["samples"], 8);
    assert!(aggregate["baseline"].is_object(), "baseline comparison missing: {aggregate}");
    let errors = fs::read_to_string(evaled.join("errors.csv")).unwrap();
    assert_eq!(errors.trim().lines().count(), 1 + 8, "one error row per sample:\n{errors}");

    let state = solved.join("states/sample_000000.csv");
    let check_output = run_ok(bin().arg("check").arg(&case).arg("--state").arg(&state));
    let stdout = stdout_of(&check_output);
    assert!(stdout.contains("violation rate"), "{stdout}");
    assert!(stdout.contains("balanced"), "{stdout}");
}

#[test]
fn eval_rejects_a_dataset_from_a_different_case() {
    let scratch = Scratch::new("eval-mismatch");
    let case = scratch.write("pair.m", PAIR);
    let config = scratch.write("config.toml", QUICK_CONFIG);
    let pair_data = scratch.path("pair-data");
    let trained = scratch.path("trained");
    let case30_data = scratch.path("case30-data");

    run_ok(
        bin()
            .arg("sample")
            .arg(&case)
            .args(["--n", "2", "--seed", "1"])
            .arg("--out")
            .arg(&pair_data),
    );
    run_ok(
        bin()
            .arg("train")
            .arg(&case)
            .arg("--data")
            .arg(&pair_data)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&trained),
    );
    run_ok(
        bin()
            .arg("sample")
            .arg(case30_path())
            .args(["--n", "2", "--seed", "1"])
            .arg("--out")
            .arg(&case30_data),
    );
    let output = bin()
        .arg("eval")
        .arg(&case)
        .arg("--checkpoint")
        .arg(trained.join("checkpoint.json"))
        .arg("--data")
        .arg(&case30_data)
        .arg("--out")
        .arg(scratch.path("evaled"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
    assert!(
        stderr_of(&output).contains("dataset was sampled from a different case"),
        "{}",
        stderr_of(&output)
    );
}

/// Training is deterministic for a fixed worker count; per-instance solves
/// are deterministic for any worker count because samples never share
/// floating-point reductions.
#[test]
fn repeated_runs_reproduce_training_and_solving() {
    let scratch = Scratch::new("repro");
    let case = scratch.write("pair.m", PAIR);
    let config = scratch.write("config.toml", QUICK_CONFIG);
    let data = scratch.path("data");
    run_ok(
        bin()
            .arg("sample")
            .arg(&case)
            .args(["--n", "6", "--seed", "9"])
            .arg("--out")
            .arg(&data),
    );
    for dir in ["t1", "t2"] {
        run_ok(
            bin()
                .arg("train")
                .arg(&case)
                .arg("--data")
                .arg(&data)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(scratch.path(dir))
                .args(["--workers", "2"]),
        );
    }
    let a = fs::read(scratch.path("t1").join("checkpoint.json")).unwrap();
    let b = fs::read(scratch.path("t2").join("checkpoint.json")).unwrap();
    assert_eq!(a, b, "checkpoint differs between identical train runs");

    for (dir, workers) in [("s1", "1"), ("s2", "3")] {
        run_ok(
            bin()
                .arg("solve")
                .arg(&case)
                .arg("--data")
                .arg(&data)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(scratch.path(dir))
                .args(["--workers", workers]),
        );
    }
    let a = fs::read(scratch.path("s1").join("results.json")).unwrap();
    let b = fs::read(scratch.path("s2").join("results.json")).unwrap();
    assert_eq!(a, b, "solve results differ across worker counts");
}

#[test]
fn check_rejects_a_state_for_the_wrong_case() {
    let scratch = Scratch::new("check-mismatch");
    let case = scratch.write("pair.m", PAIR);
    let state = scratch.write(
        "state.csv",
        "bus_id,p_demand,q_demand,p,q,v,delta\n7,0,0,0,0,1,0\n8,0.3,0.08,0,0,1,0\n",
    );
    let output = bin().arg("check").arg(&case).arg("--state").arg(&state).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
    assert!(stderr_of(&output).contains("does not exist"), "{}", stderr_of(&output));
}
