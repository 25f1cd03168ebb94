use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_escrowsim");

fn reference_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json")
}

fn escrowsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value =
        serde_json::from_str(&fs::read_to_string(reference_config()).unwrap()).unwrap();
    v["n_affiliates"] = 4.into();
    v["duration_blocks"] = 120.into();
    edit(&mut v);
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn shipped_config_validates() {
    let o = escrowsim(&["validate", reference_config().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn out_of_range_probability_names_field_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small_config(tmp.path(), "bad.json", |v| {
        v["pay_probability"] = 1.5.into()
    });
    let o = escrowsim(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("schema violation in field `pay_probability`"),
        "{err}"
    );
    let line = fs::read_to_string(&p)
        .unwrap()
        .lines()
        .position(|l| l.contains("\"pay_probability\""))
        .unwrap()
        + 1;
    assert!(err.contains(&format!(":{line}:")), "{err}");
}

#[test]
fn parse_errors_carry_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("broken.json");
    fs::write(&p, "{\n  \"seed\": 1,\n  \"n_affiliates\": oops\n}\n").unwrap();
    let o = escrowsim(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("broken.json:3:"), "{}", stderr(&o));
}

#[test]
fn missing_gas_schedule_uses_defaults_with_notice() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small_config(tmp.path(), "nosched.json", |v| {
        v.as_object_mut().unwrap().remove("gas_schedule");
    });
    let o = escrowsim(&["validate", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("notice"));
    assert!(stderr(&o).contains("deploy=505822"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(escrowsim(&[]).status.code(), Some(1));
    assert_eq!(escrowsim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(escrowsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn repeated_runs_have_identical_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small_config(tmp.path(), "c.json", |_| {});
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = escrowsim(&["run", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(manifest(&a)["trace_digest"], manifest(&b)["trace_digest"]);
    assert_eq!(manifest(&a)["config_digest"], manifest(&b)["config_digest"]);
    assert_eq!(
        fs::read(a.join("trace.ndjson")).unwrap(),
        fs::read(b.join("trace.ndjson")).unwrap()
    );
}

#[test]
fn reference_run_reports_the_cost_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ref");
    let o = escrowsim(&[
        "run",
        reference_config().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = out.join("trace.ndjson");
    let o = escrowsim(&[
        "report",
        trace.to_str().unwrap(),
        "--gas-price",
        "1000000000",
        "--fiat-rate",
        "175.59",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("total_fiat = 1.66"), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["cost"]["rho"], 100);
    assert_eq!(report["cost"]["delta"], 100);
    assert_eq!(report["cost"]["mu"], 100);
    assert_eq!(report["cost"]["total_gas"], 9_459_822);
    assert_eq!(
        report["revenue"]["affiliates"].as_array().unwrap().len(),
        100
    );
}

#[test]
fn csv_report_mirrors_cost_table() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small_config(tmp.path(), "c.json", |_| {});
    let run_dir = tmp.path().join("run");
    assert!(escrowsim(&[
        "run",
        p.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap()
    ])
    .status
    .success());
    let rep = tmp.path().join("rep");
    let o = escrowsim(&[
        "report",
        run_dir.join("trace.ndjson").to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(rep.join("cost_table.csv")).unwrap();
    assert!(table.starts_with("Actor,Operation,Cost in gas"));
    assert!(table.contains("Author,deploy,505822,1"));
    let affiliates = fs::read_to_string(rep.join("affiliates.csv")).unwrap();
    assert_eq!(affiliates.lines().count(), 5);
    assert!(rep.join("findings.csv").exists());
}

#[test]
fn truncated_trace_is_malformed_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small_config(tmp.path(), "c.json", |_| {});
    let run_dir = tmp.path().join("run");
    assert!(escrowsim(&[
        "run",
        p.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap()
    ])
    .status
    .success());
    let full = fs::read_to_string(run_dir.join("trace.ndjson")).unwrap();
    let keep: Vec<&str> = full.lines().take(10).collect();
    let cut = tmp.path().join("cut.ndjson");
    fs::write(&cut, keep.join("\n") + "\n").unwrap();
    let o = escrowsim(&["report", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("malformed trace at line 11"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unwritable_output_fails_without_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small_config(tmp.path(), "c.json", |_| {});
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"not a directory").unwrap();
    let out = blocker.join("out");
    let o = escrowsim(&["run", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn invalid_config_in_run_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small_config(tmp.path(), "c.json", |v| v["duration_blocks"] = 0.into());
    let out = tmp.path().join("out");
    let o = escrowsim(&["run", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn batch_run_writes_one_directory_per_config() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_config(tmp.path(), "a.json", |_| {});
    let b = small_config(tmp.path(), "b.json", |v| v["seed"] = 9.into());
    let out = tmp.path().join("batch");
    let o = escrowsim(&[
        "run",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ma = manifest(&out.join("000-a"));
    let mb = manifest(&out.join("001-b"));
    assert_eq!(mb["seed"], 9);
    assert_ne!(ma["trace_digest"], mb["trace_digest"]);
}
