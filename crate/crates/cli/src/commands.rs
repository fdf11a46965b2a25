//! The four verbs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cglmm::estimation::{fit, FitResult};
use cglmm::model::{bind, BoundModel};
use cglmm::oracle::{mc_group_loglik, validate_model};
use cglmm::{simulate, GroupedDataset};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::ingest::{ingest, write_csv, IngestReport, IngestSpec};
use crate::report::{fit_table, validation_table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Verb {
    Fit,
    Loglik,
    Simulate,
    Validate,
}

impl Verb {
    fn as_str(self) -> &'static str {
        match self {
            Verb::Fit => "fit",
            Verb::Loglik => "loglik",
            Verb::Simulate => "simulate",
            Verb::Validate => "validate",
        }
    }
}

/// What a verb produced: text for standard output, the structured document,
/// and an error to report after both are emitted (a failed validation).
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub document: Value,
    pub failure: Option<CliError>,
}

/// Checks that everything the verb needs is present before any computation.
pub fn check_required(verb: Verb, config: &RunConfig) -> Result<(), CliError> {
    config.model_spec()?;
    config.fit_options()?;
    config.quadrature()?;
    config.tolerance()?;
    config.params()?;
    match verb {
        Verb::Fit | Verb::Loglik | Verb::Validate => {
            config.require("data.input")?;
        }
        Verb::Simulate => {
            config.require("run.output")?;
            config.simulation_plan()?;
        }
    }
    if verb == Verb::Loglik && config.get("run.params").is_none() && config.params()?.is_empty() {
        return Err(CliError::validation("`loglik` needs parameter values (`--params` or `params.<name>`)"));
    }
    Ok(())
}

fn load_data(config: &RunConfig) -> Result<(GroupedDataset, IngestReport, BoundModel), CliError> {
    let spec = config.model_spec()?;
    let mut covariates = spec.unit_covariates().to_vec();
    covariates.extend(spec.group_covariates().iter().cloned());
    let ingest_spec = IngestSpec {
        group: config.group_column().to_string(),
        response: config.response_column().to_string(),
        trials: config.trials_column().map(String::from),
        covariates,
        group_level: spec.group_covariates().to_vec(),
    };
    let path = PathBuf::from(config.require("data.input")?);
    let (data, report) = ingest(&path, &ingest_spec)?;
    let bound = bind(&spec, &data)?;
    Ok((data, report, bound))
}

/// Parameter values from a file: a fit document, a JSON object of numbers, or
/// `name = value` lines.
fn read_params(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read `{}`: {e}", path.display())))?;
    let bad = |why: String| CliError::validation(format!("`{}`: {why}", path.display()));
    if let Ok(doc) = serde_json::from_str::<Value>(&text) {
        if let Some(list) = doc.get("parameters").and_then(Value::as_array) {
            return list
                .iter()
                .map(|p| {
                    let name = p.get("name").and_then(Value::as_str).ok_or_else(|| bad("parameter without a name".into()))?;
                    let value =
                        p.get("estimate").and_then(Value::as_f64).ok_or_else(|| bad(format!("no estimate for `{name}`")))?;
                    Ok((name.to_string(), value))
                })
                .collect();
        }
        if let Some(map) = doc.as_object() {
            return map
                .iter()
                .map(|(k, v)| v.as_f64().map(|x| (k.clone(), x)).ok_or_else(|| bad(format!("`{k}` is not a number"))))
                .collect();
        }
        return Err(bad("expected a fit document or an object of numbers".into()));
    }
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected name = value", n + 1)))?;
        let k = k.trim();
        let k = k.strip_prefix("params.").unwrap_or(k);
        let v: f64 = v.trim().parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

fn supplied_params(config: &RunConfig) -> Result<Option<BTreeMap<String, f64>>, CliError> {
    let mut values = config.params()?;
    if let Some(p) = config.path("run.params") {
        values.extend(read_params(&p)?);
    }
    Ok((!values.is_empty()).then_some(values))
}

fn fit_document(config: &RunConfig, bound: &BoundModel, ingest: &IngestReport, result: &FitResult) -> Value {
    json!({
        "verb": "fit",
        "config": config.values(),
        "model": bound.spec(),
        "data": ingest,
        "parameters": result.parameters,
        "loglik": result.loglik,
        "convergence": {
            "converged": result.converged,
            "iterations": result.iterations,
            "gradient_norm": result.gradient_norm,
            "information": result.condition,
        },
        "warnings": result.warnings,
    })
}

fn run_fit(config: &RunConfig) -> Result<Outcome, CliError> {
    let (_, ingest, bound) = load_data(config)?;
    let result = fit(&bound, None, &config.fit_options()?)?;
    Ok(Outcome {
        stdout: fit_table(&result),
        document: fit_document(config, &bound, &ingest, &result),
        failure: None,
    })
}

fn run_loglik(config: &RunConfig) -> Result<Outcome, CliError> {
    let (_, ingest, bound) = load_data(config)?;
    let values = supplied_params(config)?.unwrap_or_default();
    let natural = bound.layout().natural_from_map(&values)?;
    let loglik = bound.loglik(&natural)?;
    Ok(Outcome {
        stdout: format!("log-likelihood {loglik:.10}\n"),
        document: json!({
            "verb": "loglik",
            "config": config.values(),
            "model": bound.spec(),
            "data": ingest,
            "parameters": bound.layout().to_map(&natural),
            "loglik": loglik,
        }),
        failure: None,
    })
}

fn sidecar_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "simulated".into());
    output.with_file_name(format!("{stem}.meta.json"))
}

fn run_simulate(config: &RunConfig) -> Result<Outcome, CliError> {
    let plan = config.simulation_plan()?;
    let sim = simulate(&plan)?;
    let output = config.path("run.output").ok_or_else(|| CliError::validation("missing `run.output`"))?;
    let trials = (plan.spec.family() == cglmm::Family::Binomial).then(|| config.trials_column().unwrap_or("trials"));
    write_csv(&output, &sim.data, config.group_column(), config.response_column(), trials)?;
    let metadata = json!({
        "verb": "simulate",
        "config": config.values(),
        "data": output.to_string_lossy(),
        "simulation": sim.metadata,
    });
    let sidecar = sidecar_path(&output);
    write_json(&sidecar, &metadata)?;
    Ok(Outcome {
        stdout: format!(
            "wrote {} groups, {} units to {} (metadata {})\n",
            sim.data.n_groups(),
            sim.data.n_units(),
            output.display(),
            sidecar.display()
        ),
        document: metadata,
        failure: None,
    })
}

fn run_validate(config: &RunConfig) -> Result<Outcome, CliError> {
    let (_, ingest, bound) = load_data(config)?;
    let (natural, source) = match supplied_params(config)? {
        Some(values) => (bound.layout().natural_from_map(&values)?, "supplied"),
        None => (fit(&bound, None, &config.fit_options()?)?.natural, "fitted"),
    };
    let quad = config.quadrature()?;
    let tolerance = config.tolerance()?;
    let report = validate_model(&bound, &natural, &quad)?;
    let worst = report.max_discrepancy.max(report.total_discrepancy);
    let mut stdout = validation_table(&report, tolerance);

    let mut monte_carlo = Value::Null;
    if config.monte_carlo()? {
        let kernel = bound.kernel(&natural)?;
        let transform = bound.transform(&natural)?;
        let ncols = bound.n_unit_covariates();
        let mut rows = Vec::new();
        for (i, g) in bound.groups().iter().enumerate() {
            let prior = bound.group_prior(&natural, i)?;
            let mc = mc_group_loglik(&kernel, &prior, transform.as_ref(), &g.view(ncols), &quad)?;
            let z = (mc.estimate - report.groups[i].quadrature) / mc.std_error;
            rows.push(json!({ "group": g.id, "estimate": mc.estimate, "std_error": mc.std_error, "z": z }));
        }
        let max_z = rows.iter().filter_map(|r| r["z"].as_f64()).fold(0.0, |m: f64, z| m.max(z.abs()));
        stdout.push_str(&format!("Monte Carlo: largest |z| against quadrature {max_z:.2}\n"));
        monte_carlo = json!({ "samples": quad.mc_samples, "max_abs_z": max_z, "groups": rows });
    }

    let passed = worst < tolerance;
    let failure = (!passed).then(|| {
        CliError::validation(format!("closed form and quadrature differ by {worst:.3e} (tolerance {tolerance:.0e})"))
    });
    Ok(Outcome {
        stdout,
        document: json!({
            "verb": "validate",
            "config": config.values(),
            "model": bound.spec(),
            "data": ingest,
            "parameters": bound.layout().to_map(&natural),
            "parameter_source": source,
            "max_relative_discrepancy": worst,
            "tolerance": tolerance,
            "passed": passed,
            "report": report,
            "monte_carlo": monte_carlo,
        }),
        failure,
    })
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(format!("cannot write `{}`: {e}", path.display())))
}

/// Runs `verb` and writes its document to `run.output` (except for
/// `simulate`, whose output is the CSV itself).
pub fn execute(verb: Verb, config: &RunConfig) -> Result<Outcome, CliError> {
    check_required(verb, config)?;
    log::info!("running `{}`", verb.as_str());
    let outcome = match verb {
        Verb::Fit => run_fit(config),
        Verb::Loglik => run_loglik(config),
        Verb::Simulate => run_simulate(config),
        Verb::Validate => run_validate(config),
    }?;
    if verb != Verb::Simulate {
        if let Some(path) = config.path("run.output") {
            write_json(&path, &outcome.document)?;
        }
    }
    Ok(outcome)
}
