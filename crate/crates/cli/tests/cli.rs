use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minicluster"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&std::ffi::OsStr]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn validate_accepts_every_shipped_scenario() {
    for entry in std::fs::read_dir(scenario("")).unwrap() {
        let path = entry.unwrap().path();
        let out = run(&["validate".as_ref(), path.as_os_str()]);
        assert!(out.status.success(), "{}: {}", path.display(), text(&out.stderr));
    }
}

#[test]
fn validation_errors_exit_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nseed = 1\n[cluster\nsize = 2\n").unwrap();
    let out = run(&["validate".as_ref(), bad.as_os_str()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("line 3"), "{}", text(&out.stderr));

    let big = dir.path().join("big.toml");
    std::fs::write(
        &big,
        "name = \"x\"\nseed = 1\n[cluster]\nsize = 9\nmax_size = 4\n[[catalog]]\ncount = 9\nsockets = 1\ncores_per_socket = 4\n",
    )
    .unwrap();
    let out = run(&["run".as_ref(), big.as_os_str()]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}

#[test]
fn missing_file_is_a_runtime_error() {
    let out = run(&["run".as_ref(), "/nonexistent/scenario.toml".as_ref()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_outputs_and_cost_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("autoscale_costs.toml");
    let out = run(&[
        "run".as_ref(),
        sc.as_os_str(),
        "--seed".as_ref(),
        "3".as_ref(),
        "--reps".as_ref(),
        "1".as_ref(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    for f in ["metrics.csv", "summary.csv", "events.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let events = dir.path().join("events.jsonl");
    let out = run(&["cost".as_ref(), events.as_os_str()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("repeated"));

    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "not json\n").unwrap();
    assert_eq!(run(&["cost".as_ref(), junk.as_os_str()]).status.code(), Some(2));
}

#[test]
fn compare_prints_one_row_per_size_and_rep() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("strong_scaling.toml");
    let out = run(&[
        "compare".as_ref(),
        sc.as_os_str(),
        "--reps".as_ref(),
        "1".as_ref(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}
