use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cislunar-pgm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn stored_orbit_validates() {
    let o = cli(&["validate-nrho"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("closure error"));
}

#[test]
fn show_config_merges_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "seed = 7\n[filter]\nn_particles = 1234\n").unwrap();
    let o = cli(&["show-config", "--config", arg(&file), "--seed", "9"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seed = 9"), "{text}");
    assert!(text.contains("n_particles = 1234"), "{text}");
}

#[test]
fn unknown_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "[filter]\nswitch_stp = 3\n").unwrap();
    let o = cli(&["show-config", "--config", arg(&file)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("switch_stp"));
}

#[test]
fn scenario_dump_writes_aligned_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["scenario-dump", "--out", arg(dir.path())]);
    assert!(o.status.success());
    let truth = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    let meas = std::fs::read_to_string(dir.path().join("measurements.csv")).unwrap();
    assert_eq!(truth.lines().count(), meas.lines().count());
    assert!(truth.lines().count() > 10);
}

#[test]
fn run_exit_status_reflects_custody() {
    let dir = tempfile::tempdir().unwrap();
    let (hybrid, pgm1) = (dir.path().join("hybrid"), dir.path().join("pgm1"));
    let o = cli(&["run", "--out", arg(&hybrid)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = cli(&["run", "--mode", "pgm1-only", "--out", arg(&pgm1)]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));

    let summary = std::fs::read_to_string(hybrid.join("summary.json")).unwrap();
    assert!(summary.contains("\"custody_held\": true"));
    let o = cli(&["compare", arg(&hybrid), arg(&pgm1), "--truncate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
