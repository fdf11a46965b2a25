//! Human-readable tables.

use cglmm::estimation::FitResult;
use cglmm::oracle::ValidationReport;

fn fmt_num(v: f64) -> String {
    if v.abs() >= 1e5 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

/// Estimates with standard errors, one parameter per row.
pub fn fit_table(result: &FitResult) -> String {
    let width = result.parameters.iter().map(|p| p.name.len()).max().unwrap_or(0).max(9);
    let mut out = format!("{:<width$}  {:>12}  {:>12}\n", "Parameter", "Estimate", "Std. error");
    out.push_str(&format!("{}\n", "-".repeat(width + 28)));
    for p in &result.parameters {
        let se = match (p.fixed, p.std_error) {
            (true, _) => "(fixed)".to_string(),
            (false, Some(se)) => fmt_num(se),
            (false, None) => "N/A".to_string(),
        };
        out.push_str(&format!("{:<width$}  {:>12}  {:>12}\n", p.name, fmt_num(p.estimate), se));
    }
    out.push_str(&format!("{}\n", "-".repeat(width + 28)));
    out.push_str(&format!("{:<width$}  {:>12.4}\n", "log-likelihood", result.loglik));
    out.push_str(&format!(
        "converged: {}, iterations: {}, gradient norm: {:.2e}\n",
        result.converged, result.iterations, result.gradient_norm
    ));
    for w in &result.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

pub fn validation_table(report: &ValidationReport, tolerance: f64) -> String {
    let width = report.groups.iter().map(|g| g.group.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>18}  {:>18}  {:>10}\n", "Group", "Closed form", "Quadrature", "Rel. diff");
    for g in &report.groups {
        out.push_str(&format!(
            "{:<width$}  {:>18.10}  {:>18.10}  {:>10.2e}\n",
            g.group, g.closed_form, g.quadrature, g.discrepancy
        ));
    }
    out.push_str(&format!(
        "{:<width$}  {:>18.10}  {:>18.10}  {:>10.2e}\n",
        "total", report.closed_form, report.quadrature, report.total_discrepancy
    ));
    let worst = report.max_discrepancy.max(report.total_discrepancy);
    out.push_str(&format!(
        "max relative discrepancy {worst:.3e} ({} tolerance {tolerance:.0e})\n",
        if worst < tolerance { "within" } else { "EXCEEDS" }
    ));
    out
}
