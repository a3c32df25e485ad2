use std::path::Path;
use std::process::{Command, Output};

fn eqfree(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqfree"))
        .arg("--set")
        .arg(format!("output_dir={}", dir.display()))
        .args(args)
        .env("EQFREE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SMALL: [&str; 6] = ["-s", "n_neurons=400", "-s", "steps=50", "-s", "initial_densities=0.2,0.7"];

#[test]
fn simulate_replays_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = SMALL.to_vec();
    args.push("simulate");
    let out = eqfree(a.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let manifest = a.path().join("manifest.json");
    let out = Command::new(env!("CARGO_BIN_EXE_eqfree"))
        .arg("replay")
        .arg(&manifest)
        .arg("--output-dir")
        .arg(b.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["trajectory_0.csv", "trajectory_1.csv", "simulate.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    let header = read(a.path(), "trajectory_0.csv");
    assert!(header.starts_with("t,p,rho11,rho10,rho00"));
}

#[test]
fn oracle_check_passes_and_records_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqfree(dir.path(), &["-s", "oracle_samples=20000", "oracle-check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let cases: serde_json::Value = serde_json::from_str(&read(dir.path(), "oracle.json")).unwrap();
    assert!(!cases.as_array().unwrap().is_empty());
    assert!(read(dir.path(), "manifest.json").contains("oracle-check"));
}

#[test]
fn oversized_ring_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqfree(dir.path(), &["oracle-check", "--ring", "14"]);
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn surrogate_recovers_its_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqfree(dir.path(), &["-s", "sampler=ou", "-s", "rare_copies=20000", "rare-events"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_str(&read(dir.path(), "ou_fit.json")).unwrap();
    assert!(fit["kappa_rel_error"].as_f64().unwrap() < 0.05, "{fit}");
    assert!(fit["d0_rel_error"].as_f64().unwrap() < 0.05, "{fit}");
}

#[test]
fn bad_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eqfree(dir.path(), &["-s", "no_such_key=1", "simulate"])), 1);
    assert_eq!(code(&eqfree(dir.path(), &["-s", "epsilon", "simulate"])), 1);
    assert_eq!(code(&eqfree(dir.path(), &["-s", "epsilon=0.7", "simulate"])), 1);
    assert_eq!(code(&eqfree(dir.path(), &["no-such-command"])), 1);
    let one_sided = ["-s", "sampler=ou", "-s", "psi_min=-0.1", "rare-events"];
    assert_eq!(code(&eqfree(dir.path(), &one_sided)), 1);
}

#[test]
fn overrides_go_before_the_command() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eqfree(dir.path(), &["config", "-s", "epsilon=0.2"])), 1);
}

#[test]
fn missing_config_file_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    let out = eqfree(dir.path(), &["--config", missing.to_str().unwrap(), "simulate"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn config_prints_round_trippable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqfree(dir.path(), &["-s", "epsilon=0.2", "config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, &text).unwrap();
    let again = eqfree(dir.path(), &["--config", cfg.to_str().unwrap(), "config"]);
    assert_eq!(code(&again), 0);
    let text2 = String::from_utf8(again.stdout).unwrap();
    assert!(text2.lines().any(|l| l.replace(' ', "") == "epsilon=0.2"), "{text2}");
}
