//! Flat `key = value` configuration with namespaced keys.
//!
//! Layers, lowest precedence first: config file, `--set key=value`, dedicated
//! flags. Relative paths in a config file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cglmm::estimation::FitOptions;
use cglmm::model::ModelSpec;
use cglmm::oracle::QuadratureConfig;
use cglmm::simulate::{CovariateGenerator, GroupSizes, SimulationPlan};
use cglmm::Family;

use crate::error::CliError;

const KEYS: &[&str] = &[
    "data.input",
    "data.group",
    "data.response",
    "data.trials",
    "model.family",
    "model.unit_covariates",
    "model.group_covariates",
    "model.intercept",
    "model.variance",
    "model.shape",
    "model.trials",
    "model.estimate_dispersion",
    "model.fixed",
    "fit.max_iter",
    "fit.rel_tol",
    "fit.grad_tol",
    "fit.restarts",
    "fit.seed",
    "oracle.nodes",
    "oracle.recenter",
    "oracle.mc_samples",
    "oracle.monte_carlo",
    "oracle.tolerance",
    "oracle.seed",
    "simulate.groups",
    "simulate.units",
    "simulate.unit_generators",
    "simulate.group_generators",
    "simulate.seed",
    "run.output",
    "run.params",
    "run.seed",
];

const PATH_KEYS: &[&str] = &["data.input", "run.output", "run.params"];

fn known(key: &str) -> bool {
    KEYS.contains(&key) || key.strip_prefix("params.").is_some_and(|name| !name.is_empty())
}

/// Effective configuration: every key with its final value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl RunConfig {
    /// Parses config-file text; `base` anchors relative paths.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, CliError> {
        let mut config = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_pair(line)
                .ok_or_else(|| CliError::validation(format!("config line {}: expected `key = value`", n + 1)))?;
            let value = match base {
                Some(dir) if PATH_KEYS.contains(&key) && Path::new(value).is_relative() => {
                    dir.join(value).to_string_lossy().into_owned()
                }
                _ => value.to_string(),
            };
            config.set(key, &value).map_err(|e| CliError::validation(format!("config line {}: {}", n + 1, e.message)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !known(key) {
            return Err(CliError::validation(format!("unknown configuration key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) =
            split_pair(pair).ok_or_else(|| CliError::validation(format!("`--set {pair}`: expected key=value")))?;
        self.set(k, v)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::validation(format!("missing required setting `{key}`")))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::validation(format!("`{key}` = `{v}`: {e}"))))
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(CliError::validation(format!("`{key}` = `{v}`: expected true or false"))),
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn seed(&self, key: &str) -> Result<u64, CliError> {
        Ok(self.parsed(key)?.or(self.parsed("run.seed")?).unwrap_or(0))
    }

    pub fn group_column(&self) -> &str {
        self.get("data.group").unwrap_or("group")
    }

    pub fn response_column(&self) -> &str {
        self.get("data.response").unwrap_or("y")
    }

    pub fn trials_column(&self) -> Option<&str> {
        self.get("data.trials")
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let family: Family = self.require("model.family")?.parse().map_err(CliError::from)?;
        let mut b = ModelSpec::builder(family)
            .unit_covariates(self.list("model.unit_covariates"))
            .group_covariates(self.list("model.group_covariates"))
            .intercept(self.flag("model.intercept")?.unwrap_or(false))
            .estimate_dispersion(self.flag("model.estimate_dispersion")?.unwrap_or(false));
        if let Some(v) = self.parsed("model.variance")? {
            b = b.variance(v);
        }
        if let Some(v) = self.parsed("model.shape")? {
            b = b.shape(v);
        }
        if let Some(v) = self.parsed("model.trials")? {
            b = b.trials(v);
        }
        for item in self.list("model.fixed") {
            let (name, value) = split_pair(&item)
                .ok_or_else(|| CliError::validation(format!("`model.fixed` item `{item}`: expected name=value")))?;
            let value: f64 = value
                .parse()
                .map_err(|e| CliError::validation(format!("`model.fixed` value for `{name}`: {e}")))?;
            b = b.fix(name, value);
        }
        b.build().map_err(CliError::from)
    }

    pub fn fit_options(&self) -> Result<FitOptions, CliError> {
        let d = FitOptions::default();
        Ok(FitOptions {
            max_iter: self.parsed("fit.max_iter")?.unwrap_or(d.max_iter),
            rel_tol: self.parsed("fit.rel_tol")?.unwrap_or(d.rel_tol),
            grad_tol: self.parsed("fit.grad_tol")?.unwrap_or(d.grad_tol),
            restarts: self.parsed("fit.restarts")?.unwrap_or(d.restarts),
            seed: self.seed("fit.seed")?,
        })
    }

    pub fn quadrature(&self) -> Result<QuadratureConfig, CliError> {
        let d = QuadratureConfig::default();
        let q = QuadratureConfig {
            nodes: self.parsed("oracle.nodes")?.unwrap_or(d.nodes),
            recenter: self.flag("oracle.recenter")?.unwrap_or(d.recenter),
            mc_samples: self.parsed("oracle.mc_samples")?.unwrap_or(d.mc_samples),
            seed: self.seed("oracle.seed")?,
        };
        q.validate().map_err(CliError::from)?;
        if self.monte_carlo()? && q.mc_samples < 10_000 {
            return Err(CliError::validation("`oracle.mc_samples` must be at least 10000"));
        }
        Ok(q)
    }

    pub fn monte_carlo(&self) -> Result<bool, CliError> {
        Ok(self.flag("oracle.monte_carlo")?.unwrap_or(false))
    }

    pub fn tolerance(&self) -> Result<f64, CliError> {
        Ok(self.parsed("oracle.tolerance")?.unwrap_or(1e-6))
    }

    /// `params.<name>` entries.
    pub fn params(&self) -> Result<BTreeMap<String, f64>, CliError> {
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("params.").map(|name| (name, v)))
            .map(|(name, v)| {
                v.parse::<f64>()
                    .map(|x| (name.to_string(), x))
                    .map_err(|e| CliError::validation(format!("`params.{name}` = `{v}`: {e}")))
            })
            .collect()
    }

    pub fn simulation_plan(&self) -> Result<SimulationPlan, CliError> {
        let spec = self.model_spec()?;
        let groups: usize = self.parsed("simulate.groups")?.ok_or_else(|| {
            CliError::validation("missing required setting `simulate.groups`")
        })?;
        let units_text = self.require("simulate.units")?;
        let sizes: Vec<usize> = units_text
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::validation(format!("`simulate.units` = `{units_text}`: {e}")))?;
        let units = if sizes.len() == 1 { GroupSizes::Constant(sizes[0]) } else { GroupSizes::PerGroup(sizes) };
        Ok(SimulationPlan {
            spec,
            params: self.params()?,
            groups,
            units,
            unit_generators: parse_generators(&self.list("simulate.unit_generators"))?,
            group_generators: parse_generators(&self.list("simulate.group_generators"))?,
            seed: self.seed("simulate.seed")?,
        })
    }
}

/// Generator items: `name=normal`, `name=normal(mean;sd)`, `name=binary(p)`, or `a:b`.
fn parse_generators(items: &[String]) -> Result<Vec<CovariateGenerator>, CliError> {
    items
        .iter()
        .map(|item| {
            let bad = |why: &str| CliError::validation(format!("generator `{item}`: {why}"));
            if let Some((name, kind)) = item.split_once('=') {
                let (name, kind) = (name.trim(), kind.trim());
                let (head, args) = match kind.split_once('(') {
                    Some((h, rest)) => (
                        h.trim(),
                        rest.strip_suffix(')').ok_or_else(|| bad("missing `)`"))?.split(';').map(str::trim).collect(),
                    ),
                    None => (kind, Vec::new()),
                };
                let nums: Vec<f64> = args
                    .iter()
                    .filter(|a| !a.is_empty())
                    .map(|a| a.parse::<f64>().map_err(|_| bad("arguments must be numbers")))
                    .collect::<Result<_, _>>()?;
                match (head, nums.as_slice()) {
                    ("normal", []) => Ok(CovariateGenerator::normal(name)),
                    ("normal", [mean, sd]) => Ok(CovariateGenerator::Normal { name: name.into(), mean: *mean, sd: *sd }),
                    ("binary", [p]) => Ok(CovariateGenerator::binary(name, *p)),
                    _ => Err(bad("expected normal, normal(mean;sd) or binary(p)")),
                }
            } else if let Some((a, b)) = item.split_once(':') {
                Ok(CovariateGenerator::interaction(a.trim(), b.trim()))
            } else {
                Err(bad("expected name=kind or an a:b interaction"))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_resolves_paths() {
        let c = RunConfig::parse(
            "# a comment\nmodel.family = poisson  # trailing\ndata.input = data.csv\n",
            Some(Path::new("/tmp/cfg")),
        )
        .unwrap();
        assert_eq!(c.get("model.family"), Some("poisson"));
        assert_eq!(c.get("data.input"), Some("/tmp/cfg/data.csv"));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::parse("model.famly = poisson", None).is_err());
        assert!(RunConfig::parse("params. = 1", None).is_err());
        assert!(RunConfig::parse("params.A = 1", None).is_ok());
    }

    #[test]
    fn later_layers_win() {
        let mut c = RunConfig::parse("fit.max_iter = 10", None).unwrap();
        c.set_pair("fit.max_iter=20").unwrap();
        assert_eq!(c.fit_options().unwrap().max_iter, 20);
    }

    #[test]
    fn builds_a_model_spec() {
        let c = RunConfig::parse(
            "model.family = poisson\nmodel.intercept = true\nmodel.unit_covariates = a, b\nmodel.fixed = A=1e6",
            None,
        )
        .unwrap();
        let spec = c.model_spec().unwrap();
        assert_eq!(spec.unit_covariates(), &["a".to_string(), "b".to_string()]);
        assert_eq!(spec.fixed().get("A"), Some(&1e6));
    }

    #[test]
    fn generator_grammar() {
        let g = parse_generators(&[
            "x=normal".into(),
            "z=normal(1;0.5)".into(),
            "t=binary(0.3)".into(),
            "x:t".into(),
        ])
        .unwrap();
        assert_eq!(g[1], CovariateGenerator::Normal { name: "z".into(), mean: 1.0, sd: 0.5 });
        assert_eq!(g[3].name(), "x:t");
        assert!(parse_generators(&["x=uniform".into()]).is_err());
    }
}
