use std::fs;

use signorini_core::runner::{cmd_analyze, cmd_grushin, cmd_pipeline, cmd_solve, exit_code, ExperimentConfig, RunManifest, Workspace, EXIT_NUMERICAL, EXIT_PASS, EXIT_VALIDATION};

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

#[test]
fn two_dimensional_pipeline_skips_the_transform_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[grid]\ndim = 2\nnodes = 65\n");
    let mut ws = Workspace::open(cfg, dir.path().to_path_buf()).unwrap();
    assert_eq!(cmd_pipeline(&mut ws).unwrap(), EXIT_PASS);
    let manifest = RunManifest::load(dir.path()).unwrap().unwrap();
    let names: Vec<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["solve", "analyze", "report"]);
    assert!(dir.path().join("report.json").exists());
    assert!(!dir.path().join("atlas.csv").exists());
}

#[test]
fn analyze_without_a_solution_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(config("[grid]\nnodes = 33\n"), dir.path().to_path_buf()).unwrap();
    let err = cmd_analyze(&mut ws).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_VALIDATION);
}

#[test]
fn unconverged_solve_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(config("[grid]\nnodes = 33\n[solver]\nmax_iter = 2\n"), dir.path().to_path_buf()).unwrap();
    assert_eq!(cmd_solve(&mut ws).unwrap(), EXIT_NUMERICAL);
    let manifest = RunManifest::load(dir.path()).unwrap().unwrap();
    assert!(manifest.stage("solve").unwrap().checks.iter().any(|c| c.gating && !c.pass));
}

#[test]
fn changed_config_discards_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::open(config("[grid]\nnodes = 33\n"), dir.path().to_path_buf()).unwrap();
    assert_eq!(cmd_solve(&mut ws).unwrap(), EXIT_PASS);
    let mut ws = Workspace::open(config("seed = 3\n[grid]\nnodes = 33\n"), dir.path().to_path_buf()).unwrap();
    assert_eq!(exit_code(&cmd_analyze(&mut ws).unwrap_err()), EXIT_VALIDATION);
}

#[test]
fn tampered_artifact_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[grid]\nnodes = 33\n");
    let mut ws = Workspace::open(cfg.clone(), dir.path().to_path_buf()).unwrap();
    assert_eq!(cmd_solve(&mut ws).unwrap(), EXIT_PASS);
    let path = dir.path().join("solution.fld");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let mut ws = Workspace::open(cfg, dir.path().to_path_buf()).unwrap();
    assert!(cmd_analyze(&mut ws).is_err());
}

#[test]
fn grushin_stage_writes_three_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[grid]\nnodes = 33\n[grushin]\nnodes = 16\nfamily_size = 6\n");
    let mut ws = Workspace::open(cfg, dir.path().to_path_buf()).unwrap();
    let code = cmd_grushin(&mut ws).unwrap();
    assert!(code == EXIT_PASS || code == EXIT_NUMERICAL);
    let lp: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("grushin_lp.json")).unwrap()).unwrap();
    for key in ["p", "q", "family_id", "sup_ratio", "refinement_drift"] {
        assert!(lp.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("grushin_embedding.json").exists());
    assert!(dir.path().join("grushin_perturbed.json").exists());
}
