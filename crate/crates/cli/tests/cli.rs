use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tumorstroma(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorstroma"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn regime_i_run_writes_metrics_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = tumorstroma(&["run", "--scenario", "RegimeI_Base", "--out", "res"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("res/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("t,E_S,E_R,E_I,spatial_std_S,max_S,max_c,conservation_error")
    );
    assert_eq!(lines.count(), 501);
    assert!(dir.path().join("res/field_S_t500.pgm").exists());
    assert!(dir.path().join("res/field_I_t0.csv").exists());
    assert!(fs::read_to_string(dir.path().join("res/verdict.txt")).unwrap().contains("PASS"));
}

#[test]
fn regime_iii_breakdown_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = tumorstroma(&["run", "--scenario", "RegimeIII_FeedbackLinear", "--out", "res"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let verdict = fs::read_to_string(dir.path().join("res/verdict.txt")).unwrap();
    assert!(verdict.contains("breakdown_time"), "{verdict}");
}

#[test]
fn unwritable_output_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocked"), "not a directory").unwrap();
    let out = tumorstroma(&["run", "--scenario", "RegimeI_Base", "--out", "blocked"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn classify_reports_ill_posed_feedback_and_writes_dispersion() {
    let dir = tempfile::tempdir().unwrap();
    let out = tumorstroma(
        &["classify", "--scenario", "RegimeIII_FeedbackLinear", "--out", "res"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("regime: IllPosed"), "{text}");
    let csv = fs::read_to_string(dir.path().join("res/dispersion.csv")).unwrap();
    assert!(csv.starts_with("mu,growth,trA,detA\n"));
    assert!(dir.path().join("res/report.txt").exists());
}

#[test]
fn classify_explicit_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let stable = tumorstroma(
        &["classify", "--jacobian", "-1,0,0,-1", "--mobility", "1,0,0,1", "--out", "a"],
        dir.path(),
    );
    assert_eq!(stable.status.code(), Some(0));
    assert!(stdout(&stable).contains("regime: Stable"));

    let backward = tumorstroma(
        &["classify", "--jacobian", "-1,0,0,-1", "--mobility", "-0.1,0,0,1", "--out", "b"],
        dir.path(),
    );
    assert!(stdout(&backward).contains("regime: IllPosed"));

    let unstable = tumorstroma(&["classify", "--jacobian", "1,0,0,-2", "--out", "c"], dir.path());
    assert_eq!(unstable.status.code(), Some(1));

    let short = tumorstroma(&["classify", "--jacobian", "1,2", "--out", "d"], dir.path());
    assert_eq!(short.status.code(), Some(1));
}

#[test]
fn sweep_rejects_bad_value_lists() {
    let dir = tempfile::tempdir().unwrap();
    let empty = tumorstroma(&["sweep", "--scenario", "RegimeI_Base", "--out", "s"], dir.path());
    assert_eq!(empty.status.code(), Some(1));
    let unsorted = tumorstroma(
        &["sweep", "--scenario", "RegimeI_Base", "--values", "0.1,0.3,0.2", "--out", "s"],
        dir.path(),
    );
    assert_eq!(unsorted.status.code(), Some(1));
    let unknown = tumorstroma(
        &["sweep", "--param", "nope", "--values", "1", "--out", "s"],
        dir.path(),
    );
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn short_sweep_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), "[grid]\nn = 11\nt_final = 0.5\n").unwrap();
    let out = tumorstroma(
        &[
            "sweep", "--config", "small.cfg", "--scenario", "RegimeI_Base", "--param", "d_S", "--values",
            "0.001,0.01", "--jobs", "2", "--out", "s",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn validate_resolves_config_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("ok.cfg"),
        "scenario = RegimeII_FeedbackSaturated\n[model]\nchi_S_prime = 0.3\n[seed]\nseed = 11\n",
    )
    .unwrap();
    let ok = tumorstroma(&["validate", "--config", "ok.cfg"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let text = stdout(&ok);
    assert!(text.contains("scenario = RegimeII_FeedbackSaturated"));
    assert!(text.contains("chi_S_prime = 0.3"));
    assert!(text.contains("seed = 11"));

    fs::write(dir.path().join("bad.cfg"), "[model]\nK = -1\n").unwrap();
    let bad = tumorstroma(&["validate", "--config", "bad.cfg"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    let missing = tumorstroma(&["validate", "--config", "nope.cfg"], dir.path());
    assert_eq!(missing.status.code(), Some(1));

    let flag = tumorstroma(&["run", "--bogus"], dir.path());
    assert_eq!(flag.status.code(), Some(1));
}
