use std::path::PathBuf;
use std::process::Command;

use stein_embed::cli;
use stein_embed::report::{Check, Provenance, Report, Rule};

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut full = vec!["stein-embed"];
    full.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::main_with_args(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn report(args: &[&str]) -> Report {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "stderr: {err}");
    let r = Report::from_json(&out).unwrap();
    assert!(r.verdicts_consistent());
    r
}

#[test]
fn graph_moments_report() {
    let r = report(&["--no-timestamp", "graph-moments", "--n", "5", "--p", "0.4", "--enumerate"]);
    assert_eq!(r.schema, "stein-embed/1");
    assert_eq!(r.command, "graph-moments");
    assert!(r.pass);
    assert!(r.wall_clock_secs.is_none());
    assert!(r.checks.iter().any(|c| c.provenance == Provenance::Exact));
}

#[test]
fn timestamp_present_by_default() {
    let r = report(&["graph-moments", "--n", "6", "--p", "0.5"]);
    assert!(r.wall_clock_secs.is_some());
}

#[test]
fn same_seed_same_bytes() {
    let args = ["--no-timestamp", "--seed", "9", "graph-verify", "--n", "8", "--p", "0.3", "--samples", "5000"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.0, 0);
    assert_eq!(a.1, b.1);
    let other = run(&["--no-timestamp", "--seed", "10", "graph-verify", "--n", "8", "--p", "0.3", "--samples", "5000"]);
    assert_ne!(a.1, other.1);
}

#[test]
fn thread_count_does_not_change_output() {
    let base = ["--no-timestamp", "--seed", "3", "ustat-verify", "--kernel", "svar", "--n", "10", "--samples", "4000"];
    let mut one = vec!["--threads", "1"];
    one.extend_from_slice(&base);
    let mut four = vec!["--threads", "4"];
    four.extend_from_slice(&base);
    assert_eq!(run(&one).1, run(&four).1);
}

#[test]
fn json_roundtrip_is_lossless() {
    let r = report(&["--no-timestamp", "graph-bound", "--n", "10", "--p", "0.5", "--h", "cos111", "--samples", "20000"]);
    let back = Report::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert!(r.bounds.iter().any(|b| b.name.contains("prop")));
}

#[test]
fn csv_has_one_row_per_check() {
    let (code, out, _) = run(&["--format", "csv", "graph-moments", "--n", "4", "--p", "0.2"]);
    assert_eq!(code, 0);
    let r = report(&["graph-moments", "--n", "4", "--p", "0.2"]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("command,name,target"));
    assert_eq!(lines.len(), r.checks.len() + 1);
}

#[test]
fn stein_eval_zero_inputs_give_zero_bound() {
    let r = report(&[
        "stein-eval", "--abc", "0", "0", "0", "--h1", "1", "--h2", "1", "--h3", "1", "--d", "3", "--signorm", "2",
    ]);
    assert_eq!(r.bounds[0].value, 0.0);
    assert!(r.checks.is_empty());
}

#[test]
fn stein_eval_nonsmooth_notes_gamma() {
    let r = report(&[
        "stein-eval", "--abc", "0.1", "0.2", "0.3", "--h1", "1", "--h2", "1", "--h3", "1", "--d", "2", "--signorm", "1",
        "--nonsmooth", "0.1", "0.2", "0.3", "1", "1",
    ]);
    assert_eq!(r.bounds.len(), 2);
    assert!(r.bounds[1].value.is_finite() && r.bounds[1].value > 0.0);
    assert!(!r.notes.is_empty());
}

#[test]
fn chaos_verify_on_fixture() {
    let r = report(&[
        "--no-timestamp", "chaos-verify", "--coeffs", &data("chaos3.txt"), "--d", "3", "--samples", "20000",
    ]);
    assert!(r.pass);
}

#[test]
fn ustat_verify_on_table_kernel() {
    let r = report(&["ustat-verify", "--kernel", &data("cubic3.txt"), "--n", "8", "--samples", "4000"]);
    assert!(r.pass);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]).0, 2);
    assert_eq!(run(&["graph-moments", "--n", "3", "--p", "0.5"]).0, 2);
    assert_eq!(run(&["graph-moments", "--n", "10", "--p", "1.5"]).0, 2);
    let (code, _, err) = run(&["ustat-verify", "--kernel", "/nonexistent/kernel.txt", "--n", "5"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"));
}

#[test]
fn failed_check_exits_one() {
    let mut r = Report::new("demo", 1);
    r.check(Check::new("ok", 1.0, 1.0, 0.0, Rule::Abs, Provenance::Exact));
    assert_eq!(cli::exit_code(&r), 0);
    r.check(Check::new("bad", 1.0, 2.0, 0.1, Rule::Abs, Provenance::Exact));
    assert_eq!(cli::exit_code(&r), 1);
}

#[test]
fn bad_kernel_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("asym.txt");
    std::fs::write(&path, "2 2\n-1 0.5\n1 0.5\n-1.0 0.3\n0.0 1.0\n").unwrap();
    assert_eq!(run(&["ustat-verify", "--kernel", path.to_str().unwrap(), "--n", "5"]).0, 2);
}

#[test]
fn binary_reads_seed_from_environment() {
    let exe = env!("CARGO_BIN_EXE_stein-embed");
    let go = |seed: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(exe);
        cmd.env_remove(cli::SEED_ENV);
        if let Some(s) = seed {
            cmd.env(cli::SEED_ENV, s);
        }
        cmd.args(["--no-timestamp"]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        cmd.args(["graph-moments", "--n", "5", "--p", "0.5"]);
        let out = cmd.output().unwrap();
        (out.status.code().unwrap(), Report::from_json(&String::from_utf8_lossy(&out.stdout)).map(|r| r.seed).ok())
    };
    assert_eq!(go(None, None), (0, Some(42)));
    assert_eq!(go(Some("17"), None), (0, Some(17)));
    assert_eq!(go(Some("17"), Some("5")), (0, Some(5)));
    assert_eq!(go(Some("abc"), None).0, 2);
}
