use std::fs;
use std::path::Path;
use std::process::Command;

use hjlab_cli::{preset, run_experiment, ExperimentConfig, StageStatus, PRESET_NAMES};

const MINIMAL: &str = r#"
name = "minimal"

[grid]
dim = 1
n = 256

[problem]
gradient_bound = 2.0
diffusion = { family = "sin_squared", amplitude = 1.0 }

[[problem.hamiltonians]]
family = "manufactured"
corrector = [{ amplitude = 0.15, k = [1, 0], wave = "sin" }]
diffusion = { family = "sin_squared", amplitude = 1.0 }
discrete_correction = true

[[stage]]
name = "cell"
kind = "ergodic-sweep"
epsilons = [0.25]
"#;

fn minimal_in(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
    c.output.directory = dir.to_path_buf();
    c
}

fn hjlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hjlab"))
}

#[test]
fn minimal_config_runs_one_stage() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&minimal_in(dir.path())).unwrap();
    assert_eq!(outcome.manifest.stages.len(), 1);
    assert_eq!(outcome.manifest.stages[0].status, StageStatus::Passed);
    assert_eq!(outcome.manifest.config_hash.len(), 64);

    let sweep = fs::read_to_string(dir.path().join("cell.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "epsilon,eta,Hbar,grad_norm,residual,wall_time");
    assert_eq!(lines.len(), 2);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "minimal");
    assert_eq!(summary["stages"][0]["name"], "cell");
    assert_eq!(summary["stages"][0]["status"], "passed");
    assert!(summary["stages"][0]["metrics"]["hbar"].as_f64().unwrap().is_finite());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&minimal_in(a.path())).unwrap();
    run_experiment(&minimal_in(b.path())).unwrap();
    let mut compared = 0;
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "manifest.json" {
            continue;
        }
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
        compared += 1;
    }
    assert!(compared >= 2);
}

#[test]
fn failed_stage_skips_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("epsilons = [0.25]", "epsilons = [0.25]\nergodic_max_time = 0.01")
        + r#"
[[stage]]
name = "est"
kind = "estimates"
depends_on = ["cell"]
epsilons = [0.25]
initial = { source = "corrector" }
"#;
    let mut config = ExperimentConfig::from_toml(&text).unwrap();
    config.output.directory = dir.path().to_path_buf();
    let outcome = run_experiment(&config).unwrap();
    let cell = outcome.manifest.record("cell").unwrap();
    assert_eq!(cell.status, StageStatus::Failed);
    assert!(cell.error.as_deref().unwrap().contains("did not converge"));
    let est = outcome.manifest.record("est").unwrap();
    assert_eq!(est.status, StageStatus::Skipped);
    assert_eq!(est.skipped_because.as_deref(), Some("cell"));
    assert!(!outcome.manifest.all_passed());
}

#[test]
fn stage_failure_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fail.toml");
    let text = MINIMAL.replace("epsilons = [0.25]", "epsilons = [0.25]\nergodic_max_time = 0.01");
    fs::write(&path, text).unwrap();
    let out = hjlab().arg("run").arg(&path).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_family_is_a_validation_error_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let out_dir = dir.path().join("out");
    let text = MINIMAL.replace("family = \"manufactured\"", "family = \"cubic\"")
        + &format!("\n[output]\ndirectory = {:?}\n", out_dir.display().to_string());
    fs::write(&path, text).unwrap();
    for verb in ["validate", "run"] {
        let out = hjlab().arg(verb).arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(1));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("problem.hamiltonians[0].family") && err.contains("cubic"), "{err}");
    }
    assert!(!out_dir.exists());
}

#[test]
fn unknown_preset_exits_with_code_1() {
    let out = hjlab().args(["preset", "unknown", "--emit-config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn emitted_preset_parses_back() {
    let out = hjlab().args(["preset", "energy-audit", "--emit-config"]).output().unwrap();
    assert!(out.status.success());
    let parsed = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(parsed, preset("energy-audit").unwrap());
}

#[test]
fn annotated_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in PRESET_NAMES {
        let text = fs::read_to_string(root.join(format!("{name}.toml"))).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), preset(name).unwrap(), "{name}");
    }
}
