//! End-to-end checks of the `fatcc` binary: run, compare, config
//! diagnostics, determinism through the CLI, and the output-dir override.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fatcc_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fatcc"))
}

fn write_small_config(path: &Path, output: &Path) {
    let body = format!(
        "# tiny smoke experiment\n\
         method = fedpgd\n\
         rounds = 2\n\
         seed = 42\n\
         dataset.synth.classes = 3\n\
         dataset.synth.dims = 5\n\
         dataset.synth.train_per_class = 20\n\
         dataset.synth.test_per_class = 8\n\
         partition.clients = 2\n\
         model.hidden = 8,6\n\
         train.batch_size = 16\n\
         attack.epsilon = 0.05\n\
         attack.steps = 3\n\
         eval.attacks = pgd5\n\
         output = {}\n",
        output.display()
    );
    fs::write(path, body).unwrap();
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn run_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.cfg");
    let report = dir.path().join("out.csv");
    write_small_config(&config, &report);

    let output = fatcc_bin()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("report written to"));

    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("round,ca,ra_pgd5,train_loss\n"));
    assert_eq!(text.lines().count(), 1 + 2 + 1);
}

#[test]
fn run_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.cfg");
    let report = dir.path().join("out.csv");
    write_small_config(&config, &report);

    let run = |out: &Path| {
        let output = fatcc_bin()
            .args(["run", "--config"])
            .arg(&config)
            .arg(format!("output={}", out.display()))
            .output()
            .unwrap();
        assert!(output.status.success(), "stderr: {}", stderr(&output));
        fs::read(out).unwrap()
    };
    let a = run(&dir.path().join("a.csv"));
    let b = run(&dir.path().join("b.csv"));
    assert_eq!(a, b);
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.cfg");
    let report = dir.path().join("out.csv");
    write_small_config(&config, &report);

    let output = fatcc_bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("rounds=4")
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 + 1);
}

#[test]
fn invalid_config_exits_nonzero_with_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "method = fst\nrounds = soon\n").unwrap();
    let output = fatcc_bin()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = stderr(&output);
    assert!(err.contains("bad.cfg:2"), "missing location: {err}");
    assert!(err.contains("soon"), "missing value: {err}");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "methd = fst\n").unwrap();
    let output = fatcc_bin()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("methd"));
}

#[test]
fn compare_reports_deltas_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "round,ca,train_loss\n1,0.9,1\nlast5_mean,0.9,1\n").unwrap();
    fs::write(&b, "round,ca,train_loss\n1,0.85,1\nlast5_mean,0.85,1\n").unwrap();

    let output = fatcc_bin().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let out = stdout(&output);
    assert!(out.contains("metric,first,second,delta"), "{out}");
    assert!(
        out.lines()
            .any(|l| l.starts_with("ca,0.9,0.85,0.050000000")),
        "{out}"
    );

    // Identical files: all deltas zero.
    let output = fatcc_bin().arg("compare").arg(&a).arg(&a).output().unwrap();
    let out = stdout(&output);
    assert!(out.lines().any(|l| l == "ca,0.9,0.9,0"), "{out}");

    // Schema mismatch names the offending column.
    let c = dir.path().join("c.csv");
    fs::write(&c, "round,ca,ra_pgd40,train_loss\nlast5_mean,0.9,0.4,1\n").unwrap();
    let output = fatcc_bin().arg("compare").arg(&a).arg(&c).output().unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("ra_pgd40"));
}

#[test]
fn output_dir_env_var_redirects_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("reports");
    let config = dir.path().join("exp.cfg");
    write_small_config(&config, Path::new("relative.csv"));

    let output = fatcc_bin()
        .args(["run", "--config"])
        .arg(&config)
        .env("FATCC_OUTPUT_DIR", &outdir)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(outdir.join("relative.csv").exists());
}
