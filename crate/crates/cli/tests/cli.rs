use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cglmm_cli::{execute, RunConfig, Verb};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cglmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cglmm")).args(args).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_block(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

/// Simulates the Poisson example into `dir` and returns the CSV path.
fn simulated(dir: &Path) -> String {
    let csv = dir.join("sim.csv");
    let config = configs().join("sim_poisson.conf");
    let out = cglmm(&["simulate", "--config", config.to_str().unwrap(), "--output", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    csv.to_string_lossy().into_owned()
}

#[test]
fn loglik_at_the_optimum_equals_the_fitted_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated(dir.path());
    let config = configs().join("sim_poisson.conf");
    let config = config.to_str().unwrap();
    let fitted = dir.path().join("fit.json");
    let evaluated = dir.path().join("loglik.json");
    assert!(cglmm(&["fit", "--config", config, "--input", &csv, "--output", fitted.to_str().unwrap()]).status.success());
    let out = cglmm(&[
        "loglik", "--config", config, "--input", &csv, "--params", fitted.to_str().unwrap(), "--output",
        evaluated.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (fit, ll) = (json(&fitted), json(&evaluated));
    let a = fit["loglik"].as_f64().unwrap();
    let b = ll["loglik"].as_f64().unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
}

#[test]
fn fit_document_carries_table_convergence_and_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated(dir.path());
    let config = configs().join("sim_poisson.conf");
    let doc_path = dir.path().join("fit.json");
    let out = cglmm(&[
        "fit", "--config", config.to_str().unwrap(), "--input", &csv, "--output", doc_path.to_str().unwrap(),
        "--set", "fit.max_iter=300",
    ]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Estimate") && table.contains("Std. error") && table.contains("log-likelihood"));
    let doc = json(&doc_path);
    assert_eq!(doc["parameters"].as_array().unwrap().len(), 3);
    assert_eq!(doc["convergence"]["converged"], true);
    assert_eq!(doc["config"]["fit.max_iter"], "300");
    assert_eq!(doc["config"]["data.input"], csv.as_str());
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("sim_gamma.conf");
    let config = config.to_str().unwrap();
    let paths: Vec<String> = (0..2).map(|k| dir.path().join(format!("{k}.csv")).to_string_lossy().into_owned()).collect();
    for p in &paths {
        assert!(cglmm(&["simulate", "--config", config, "--output", p]).status.success());
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
    let reseeded = dir.path().join("other.csv");
    let seeded = cglmm(&["simulate", "--config", config, "--output", reseeded.to_str().unwrap(), "--set", "simulate.seed=99"]);
    assert!(seeded.status.success());
    assert_ne!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&reseeded).unwrap());
    let meta = json(&dir.path().join("0.meta.json"));
    assert_eq!(meta["simulation"]["seed"], 14);
}

#[test]
fn flags_override_config_values() {
    let mut config = RunConfig::load(&configs().join("sim_poisson.conf")).unwrap();
    config.set_pair("simulate.seed=1").unwrap();
    assert_eq!(config.simulation_plan().unwrap().seed, 1);
    let cli = <cglmm_cli::Cli as clap::Parser>::try_parse_from([
        "cglmm", "fit", "--set", "fit.seed=3", "--set", "run.seed=4", "--seed", "5", "--input", "x.csv",
    ])
    .unwrap();
    let config = cli.config().unwrap();
    assert_eq!(config.get("run.seed"), Some("5"));
    assert_eq!(config.get("data.input"), Some("x.csv"));
    assert_eq!(config.fit_options().unwrap().seed, 3);
}

#[test]
fn validation_errors_exit_2_with_an_error_block() {
    let out = cglmm(&["fit", "--set", "model.family=poison", "--input", "whatever.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let block = stderr_block(&out);
    assert_eq!(block["error"]["kind"], "validation");
    assert_eq!(block["error"]["exit_code"], 2);

    let out = cglmm(&["fit", "--set", "model.famly=poisson"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_block(&out)["error"]["message"].as_str().unwrap().contains("model.famly"));

    // required settings are checked before anything is read
    let out = cglmm(&["fit", "--set", "model.family=poisson"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_block(&out)["error"]["message"].as_str().unwrap().contains("data.input"));
}

#[test]
fn missing_input_exits_4() {
    let out = cglmm(&["fit", "--set", "model.family=poisson", "--input", "/definitely/not/here.csv"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_block(&out)["error"]["kind"], "io");
}

#[test]
fn optimizer_failure_exits_3_with_the_best_fit() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated(dir.path());
    let config = configs().join("sim_poisson.conf");
    let out = cglmm(&["fit", "--config", config.to_str().unwrap(), "--input", &csv, "--set", "fit.max_iter=2"]);
    assert_eq!(out.status.code(), Some(3));
    let block = stderr_block(&out);
    assert_eq!(block["error"]["kind"], "convergence");
    assert!(block["error"]["details"]["loglik"].is_number());
}

#[test]
fn validate_fails_above_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated(dir.path());
    let config = configs().join("sim_poisson.conf");
    let report = dir.path().join("validate.json");
    let out = cglmm(&[
        "validate", "--config", config.to_str().unwrap(), "--input", &csv, "--output", report.to_str().unwrap(),
        "--set", "oracle.tolerance=1e-30",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let doc = json(&report);
    assert_eq!(doc["passed"], false);
    assert_eq!(doc["parameter_source"], "supplied");
}

#[test]
fn validate_with_monte_carlo() {
    let dir = tempfile::tempdir().unwrap();
    let csv = simulated(dir.path());
    let mut config = RunConfig::load(&configs().join("sim_poisson.conf")).unwrap();
    config.set("data.input", &csv).unwrap();
    config.set("oracle.monte_carlo", "true").unwrap();
    let outcome = execute(Verb::Validate, &config).unwrap();
    assert!(outcome.failure.is_none());
    let z = outcome.document["monte_carlo"]["max_abs_z"].as_f64().unwrap();
    // 200 groups: the largest of 200 |z| values rarely exceeds 4
    assert!(z < 4.5, "{z}");
}

#[test]
fn loglik_requires_parameters() {
    let mut config = RunConfig::default();
    config.set("model.family", "poisson").unwrap();
    config.set("data.input", "x.csv").unwrap();
    let err = execute(Verb::Loglik, &config).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
