//! CSV ingestion into a grouped dataset.

use std::collections::BTreeSet;
use std::path::Path;

use cglmm::GroupedDataset;

use crate::error::CliError;

/// Which columns to read.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestSpec {
    pub group: String,
    pub response: String,
    pub trials: Option<String>,
    pub covariates: Vec<String>,
    /// Covariates that must not vary within a group.
    pub group_level: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct IngestReport {
    pub rows: usize,
    pub dropped_rows: usize,
    pub groups: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "N/A" | "NaN" | "nan" | "." | "null")
}

/// Reads `path`, keeping the group, response, optional trials and the named
/// covariate columns (plus the parents of any `a:b` column, so interactions can
/// be checked). Rows with a missing value in a kept column are dropped.
pub fn ingest(path: &Path, spec: &IngestSpec) -> Result<(GroupedDataset, IngestReport), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(format!("cannot open `{}`: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::io(format!("cannot read the header of `{}`: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::validation(format!("column `{name}` not found in `{}`", path.display())))
    };
    let group_idx = position(&spec.group)?;
    let response_idx = position(&spec.response)?;
    let trials_idx = spec.trials.as_deref().map(position).transpose()?;

    let mut wanted: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for name in &spec.covariates {
        let parents: Vec<&str> = name.split(':').collect();
        if parents.len() > 1 {
            for p in parents {
                if header.iter().any(|h| h == p) && seen.insert(p.to_string()) {
                    wanted.push(p.to_string());
                }
            }
        }
        if seen.insert(name.clone()) {
            wanted.push(name.clone());
        }
    }
    let cov_idx: Vec<usize> = wanted.iter().map(|c| position(c)).collect::<Result<_, _>>()?;

    let mut data = GroupedDataset::new(wanted.clone());
    let mut rows = 0;
    let mut dropped = 0;
    let mut row = vec![0.0; cov_idx.len()];
    for record in reader.records() {
        let record = record.map_err(|e| CliError::validation(format!("`{}`: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        rows += 1;
        let field = |i: usize| record.get(i).unwrap_or("");
        let needed = std::iter::once(group_idx)
            .chain(std::iter::once(response_idx))
            .chain(trials_idx)
            .chain(cov_idx.iter().copied());
        if needed.clone().any(|i| is_missing(field(i))) {
            dropped += 1;
            continue;
        }
        let number = |i: usize| -> Result<f64, CliError> {
            let text = field(i);
            text.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                CliError::validation(format!(
                    "`{}` line {line}, column `{}`: `{text}` is not a finite number",
                    path.display(),
                    header[i]
                ))
            })
        };
        let y = number(response_idx)?;
        let trials = match trials_idx {
            Some(i) => {
                let t = number(i)?;
                if t < 0.0 || t.fract() != 0.0 || t > f64::from(u32::MAX) {
                    return Err(CliError::validation(format!(
                        "`{}` line {line}, column `{}`: trials must be a non-negative integer, got {t}",
                        path.display(),
                        header[i]
                    )));
                }
                Some(t as u32)
            }
            None => None,
        };
        for (slot, &i) in row.iter_mut().zip(&cov_idx) {
            *slot = number(i)?;
        }
        data.push(field(group_idx), y, trials, &row)
            .map_err(|e| CliError::validation(format!("`{}` line {line}: {e}", path.display())))?;
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} of {rows} rows with missing values");
    }
    if data.n_units() == 0 {
        return Err(CliError::validation(format!("`{}` has no complete rows", path.display())));
    }
    data.check_interactions().map_err(CliError::from)?;
    check_constancy(&data, &spec.group_level)?;
    let groups = data.n_groups();
    Ok((data, IngestReport { rows, dropped_rows: dropped, groups }))
}

fn check_constancy(data: &GroupedDataset, names: &[String]) -> Result<(), CliError> {
    let ncol = data.columns().len();
    for name in names {
        let Some(k) = data.column_index(name) else { continue };
        for g in data.groups() {
            let first = g.covariates[k];
            if (1..g.len()).any(|j| g.covariates[j * ncol + k] != first) {
                return Err(cglmm::Error::GroupConstancy { column: name.clone(), group: g.id.clone() }.into());
            }
        }
    }
    Ok(())
}

/// Writes a dataset as CSV with the group, response and optional trials first.
pub fn write_csv(
    path: &Path,
    data: &GroupedDataset,
    group: &str,
    response: &str,
    trials: Option<&str>,
) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::io(format!("cannot write `{}`: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec![group.to_string(), response.to_string()];
    header.extend(trials.map(String::from));
    header.extend(data.columns().iter().cloned());
    w.write_record(&header).map_err(io)?;
    let ncol = data.columns().len();
    for g in data.groups() {
        for (j, &y) in g.y.iter().enumerate() {
            let mut record = vec![g.id.clone(), y.to_string()];
            if trials.is_some() {
                let t = g.trials.as_ref().map_or(1, |t| t[j]);
                record.push(t.to_string());
            }
            record.extend(g.covariates[j * ncol..(j + 1) * ncol].iter().map(f64::to_string));
            w.write_record(&record).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::io(format!("cannot write `{}`: {e}", path.display())))
}
