//! Seeded data generation from a fully specified conjugate mixed model.
//!
//! Every group draws from its own ChaCha8 stream (selected by group index),
//! so a dataset is bit-reproducible from the seed and groups can be generated
//! in any order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, Normal, Poisson};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::families::{ConjugatePrior, Family, FamilyKernel};
use crate::model::{bind, GroupedDataset, ModelSpec, Role};

/// How one covariate column is generated.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateGenerator {
    Normal { name: String, mean: f64, sd: f64 },
    Binary { name: String, p: f64 },
    /// Product of two previously generated columns, named `a:b`.
    Interaction { left: String, right: String },
}

impl CovariateGenerator {
    pub fn normal(name: impl Into<String>) -> Self {
        CovariateGenerator::Normal { name: name.into(), mean: 0.0, sd: 1.0 }
    }

    pub fn binary(name: impl Into<String>, p: f64) -> Self {
        CovariateGenerator::Binary { name: name.into(), p }
    }

    pub fn interaction(left: impl Into<String>, right: impl Into<String>) -> Self {
        CovariateGenerator::Interaction { left: left.into(), right: right.into() }
    }

    pub fn name(&self) -> String {
        match self {
            CovariateGenerator::Normal { name, .. } | CovariateGenerator::Binary { name, .. } => name.clone(),
            CovariateGenerator::Interaction { left, right } => format!("{left}:{right}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum GroupSizes {
    Constant(usize),
    PerGroup(Vec<usize>),
}

impl GroupSizes {
    fn size(&self, i: usize) -> usize {
        match self {
            GroupSizes::Constant(n) => *n,
            GroupSizes::PerGroup(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationPlan {
    /// Model to simulate from; its covariate names must be generated below.
    pub spec: ModelSpec,
    /// True natural-scale values of every parameter not fixed in `spec`.
    pub params: BTreeMap<String, f64>,
    pub groups: usize,
    pub units: GroupSizes,
    /// Columns drawn independently for every unit.
    pub unit_generators: Vec<CovariateGenerator>,
    /// Columns drawn once per group and repeated for its units.
    pub group_generators: Vec<CovariateGenerator>,
    pub seed: u64,
}

/// A simulated dataset together with the truth that generated it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Simulated {
    #[serde(skip)]
    pub data: GroupedDataset,
    pub metadata: SimulationMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationMetadata {
    pub family: Family,
    pub seed: u64,
    pub groups: usize,
    pub units: usize,
    pub parameters: BTreeMap<String, f64>,
    pub spec: ModelSpec,
    /// How the random effect was drawn, spelled out for the family.
    pub random_effect: String,
    /// Random-effect mean μ₀ drawn for each group, in group order.
    pub group_effects: Vec<f64>,
}

fn random_effect_note(family: Family) -> &'static str {
    match family {
        Family::Gaussian => "mu0 ~ Normal(lambda, kappa2); y | mu0 ~ Normal(mu0 + zeta(x), sigma2)",
        Family::Poisson => "mu0 ~ Gamma(shape A, scale B), E mu0 = A*B; y | mu0 ~ Poisson(mu0 * exp(zeta(x)))",
        Family::Binomial => "mu0 ~ Beta(A, B); y | mu0 ~ Binomial(trials, mu0)",
        Family::Gamma => {
            "mu0 ~ InverseGamma(shape C, scale D) with density ∝ mu0^-(C+1) exp(-D/mu0), E mu0 = D/(C-1); \
             y | mu0 ~ Gamma(shape A, mean mu0 / zeta(x))"
        }
    }
}

fn draw_column(gen: &CovariateGenerator, known: &dyn Fn(&str) -> Option<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
    Ok(match gen {
        CovariateGenerator::Normal { mean, sd, .. } => Normal::new(*mean, *sd)
            .map_err(|e| Error::Plan(format!("normal generator: {e}")))?
            .sample(rng),
        CovariateGenerator::Binary { p, .. } => f64::from(u8::from(rng.random::<f64>() < *p)),
        CovariateGenerator::Interaction { left, right } => {
            let find = |n: &str| {
                known(n).ok_or_else(|| Error::Plan(format!("interaction parent `{n}` must be generated before it")))
            };
            find(left)? * find(right)?
        }
    })
}

fn validate(plan: &SimulationPlan, names: &[String]) -> Result<()> {
    if plan.groups == 0 {
        return Err(Error::Plan("at least one group is required".into()));
    }
    if let GroupSizes::PerGroup(v) = &plan.units {
        if v.len() != plan.groups {
            return Err(Error::Plan(format!("{} group sizes given for {} groups", v.len(), plan.groups)));
        }
    }
    for gen in plan.unit_generators.iter().chain(&plan.group_generators) {
        match gen {
            CovariateGenerator::Normal { sd, mean, .. } if !(*sd >= 0.0 && sd.is_finite() && mean.is_finite()) => {
                return Err(Error::Plan(format!("generator `{}` needs a finite mean and sd ≥ 0", gen.name())))
            }
            CovariateGenerator::Binary { p, .. } if !(0.0..=1.0).contains(p) => {
                return Err(Error::Plan(format!("generator `{}` needs 0 ≤ p ≤ 1", gen.name())))
            }
            _ => {}
        }
    }
    let mut sorted = names.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Plan("covariate names must be distinct".into()));
    }
    for (k, gen) in plan.group_generators.iter().enumerate() {
        if let CovariateGenerator::Interaction { left, right } = gen {
            let earlier: Vec<String> = plan.group_generators[..k].iter().map(|g| g.name()).collect();
            if !earlier.contains(left) || !earlier.contains(right) {
                return Err(Error::Plan(format!("group interaction `{}` must use earlier group columns", gen.name())));
            }
        }
    }
    for (name, v) in &plan.params {
        if !v.is_finite() {
            return Err(Error::Plan(format!("parameter `{name}` is {v}")));
        }
    }
    Ok(())
}

fn placeholder(family: Family) -> f64 {
    match family {
        Family::Gamma => 1.0,
        _ => 0.0,
    }
}

/// Draws a dataset from `plan`: μ₀ per group from the conjugate distribution,
/// then conditionally independent responses.
pub fn simulate(plan: &SimulationPlan) -> Result<Simulated> {
    let spec = &plan.spec;
    let family = spec.family();
    let names: Vec<String> =
        plan.unit_generators.iter().chain(&plan.group_generators).map(CovariateGenerator::name).collect();
    validate(plan, &names)?;

    let mut data = GroupedDataset::new(names.clone());
    let mut rngs: Vec<ChaCha8Rng> = (0..plan.groups)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(i as u64);
            rng
        })
        .collect();
    let width = format!("{}", plan.groups).len();
    let n_unit_cols = plan.unit_generators.len();
    for (i, rng) in rngs.iter_mut().enumerate() {
        let id = format!("g{:0width$}", i + 1);
        let group_names = &names[n_unit_cols..];
        let mut group_row: Vec<f64> = Vec::with_capacity(plan.group_generators.len());
        for gen in &plan.group_generators {
            let known = |n: &str| group_names.iter().position(|c| c == n).and_then(|k| group_row.get(k).copied());
            let v = draw_column(gen, &known, rng)?;
            group_row.push(v);
        }
        for _ in 0..plan.units.size(i) {
            let mut row: Vec<f64> = Vec::with_capacity(names.len());
            for gen in &plan.unit_generators {
                let known = |n: &str| {
                    names[..n_unit_cols]
                        .iter()
                        .position(|c| c == n)
                        .and_then(|k| row.get(k).copied())
                        .or_else(|| group_names.iter().position(|c| c == n).map(|k| group_row[k]))
                };
                let v = draw_column(gen, &known, rng)?;
                row.push(v);
            }
            row.extend_from_slice(&group_row);
            let trials = (family == Family::Binomial).then_some(spec.trials());
            data.push(&id, placeholder(family), trials, &row)?;
        }
    }

    let bound = bind(spec, &data).map_err(|e| Error::Plan(e.to_string()))?;
    let layout = bound.layout();
    let natural = layout.natural_from_map(&plan.params).map_err(|e| Error::Plan(e.to_string()))?;
    // κ² = 0 is a point mass at λ, outside the conjugate family but a valid limit
    let point_mass = family == Family::Gaussian
        && layout.slots().iter().zip(&natural).any(|(s, &v)| s.role == Role::Kappa2 && v == 0.0);
    let mut checked = natural.clone();
    if point_mass {
        checked[layout.index_of("kappa2").expect("gaussian layout has kappa2")] = 1.0;
    }
    layout.pack(&checked).map_err(|e| Error::Plan(e.to_string()))?;
    let kernel = bound.kernel(&natural)?;
    let transform = bound.transform(&natural)?;
    let ncols = bound.n_unit_covariates();

    let mut effects = Vec::with_capacity(plan.groups);
    for (i, rng) in rngs.iter_mut().enumerate() {
        let mu0 = if point_mass {
            bound.group_prior(&checked, i)?.family_params().0
        } else {
            let prior = bound.group_prior(&natural, i).map_err(|e| Error::Plan(e.to_string()))?;
            draw_mean(&prior, rng)?
        };
        effects.push(mu0);
        let group = &bound.groups()[i];
        let view = group.view(ncols);
        let mut ys = Vec::with_capacity(group.y.len());
        for j in 0..group.y.len() {
            let unit_kernel = view.kernel_for(&kernel, j)?;
            let mu = match &transform {
                Some(t) => t.mean_at(mu0, view.row(j)),
                None => mu0,
            };
            ys.push(draw_response(&unit_kernel, mu, rng)?);
        }
        let idx = data.groups().iter().position(|g| g.id == group.id).expect("bound groups come from the dataset");
        data.set_responses(idx, ys)?;
    }

    let parameters = layout.to_map(&natural);
    Ok(Simulated {
        metadata: SimulationMetadata {
            family,
            seed: plan.seed,
            groups: plan.groups,
            units: data.n_units(),
            parameters,
            spec: spec.clone(),
            random_effect: random_effect_note(family).to_string(),
            group_effects: effects,
        },
        data,
    })
}

/// A small random instance with moderate parameters, for oracle and
/// property checks: up to 5 groups of up to 6 units. Unit-level plans carry an
/// intercept and two unit covariates (one normal, one binary); group-level
/// plans alternate between a free random-effect mean and a mean linked to one
/// group covariate.
pub fn random_plan(family: Family, unit_level: bool, seed: u64) -> Result<SimulationPlan> {
    if unit_level && !family.supports_unit_covariates() {
        return Err(Error::BinomialUnitLevel);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let groups = u(1.0, 5.999) as usize;
    let sizes: Vec<usize> = (0..groups).map(|_| u(1.0, 6.999) as usize).collect();
    let linked = unit_level || u(0.0, 1.0) < 0.5;
    let mut builder = ModelSpec::builder(family);
    let mut params = BTreeMap::new();
    let mut unit_generators = Vec::new();
    let mut group_generators = Vec::new();
    if unit_level {
        builder = builder.intercept(true).unit_covariates(["x1", "x2"]);
        unit_generators = vec![CovariateGenerator::normal("x1"), CovariateGenerator::binary("x2", 0.4)];
        params.insert("x1".to_string(), u(-0.6, 0.6));
        params.insert("x2".to_string(), u(-0.6, 0.6));
    } else if linked {
        builder = builder.intercept(true).group_covariates(["g1"]);
        group_generators = vec![CovariateGenerator::normal("g1")];
        params.insert("g1".to_string(), u(-0.5, 0.5));
    }
    let mut set = |name: &str, v: f64| {
        params.insert(name.to_string(), v);
    };
    match family {
        Family::Gaussian => {
            builder = builder.variance(u(0.3, 2.0));
            set("kappa2", u(0.2, 3.0));
            if linked {
                set("(Intercept)", u(-2.0, 2.0));
            } else {
                set("lambda", u(-2.0, 2.0));
            }
        }
        Family::Poisson => {
            let a = u(0.5, 8.0);
            set("A", a);
            let mean = u(0.5, 5.0);
            if linked {
                set("(Intercept)", mean.ln());
            } else {
                set("B", mean / a);
            }
        }
        Family::Binomial => {
            builder = builder.trials(u(1.0, 5.999) as u32);
            if linked {
                set("(Intercept)", u(-1.0, 1.0));
                set("precision", u(1.0, 10.0));
            } else {
                set("A", u(0.5, 5.0));
                set("B", u(0.5, 5.0));
            }
        }
        Family::Gamma => {
            builder = builder.shape(u(0.5, 5.0));
            let c = u(2.5, 8.0);
            set("C", c);
            let mean = u(0.3, 3.0);
            if linked {
                // a unit-level intercept acts on the reciprocal of the mean
                set("(Intercept)", if unit_level { -mean.ln() } else { mean.ln() });
            } else {
                set("D", (c - 1.0) * mean);
            }
        }
    }
    Ok(SimulationPlan {
        spec: builder.build()?,
        params,
        groups,
        units: GroupSizes::PerGroup(sizes),
        unit_generators,
        group_generators,
        seed,
    })
}

fn plan_error(e: impl std::fmt::Display) -> Error {
    Error::Plan(e.to_string())
}

fn draw_mean(prior: &ConjugatePrior, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (first, second) = prior.family_params();
    Ok(match prior.family() {
        Family::Gaussian => Normal::new(first, second.sqrt()).map_err(plan_error)?.sample(rng),
        Family::Poisson => Gamma::new(first, second).map_err(plan_error)?.sample(rng),
        Family::Binomial => Beta::new(first, second).map_err(plan_error)?.sample(rng),
        Family::Gamma => 1.0 / Gamma::new(first, 1.0 / second).map_err(plan_error)?.sample(rng),
    })
}

fn draw_response(kernel: &FamilyKernel, mu: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !mu.is_finite() {
        return Err(Error::Plan(format!("unit mean {mu} is not finite")));
    }
    Ok(match *kernel {
        FamilyKernel::Gaussian { variance } => Normal::new(mu, variance.sqrt()).map_err(plan_error)?.sample(rng),
        FamilyKernel::Poisson => {
            if mu <= 0.0 {
                0.0
            } else {
                Poisson::new(mu).map_err(plan_error)?.sample(rng)
            }
        }
        FamilyKernel::Binomial { trials } => {
            Binomial::new(u64::from(trials), mu.clamp(0.0, 1.0)).map_err(plan_error)?.sample(rng) as f64
        }
        FamilyKernel::Gamma { shape } => Gamma::new(shape, mu / shape).map_err(plan_error)?.sample(rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson_plan(seed: u64) -> SimulationPlan {
        SimulationPlan {
            spec: ModelSpec::builder(Family::Poisson)
                .intercept(true)
                .unit_covariates(["x"])
                .group_covariates(["t"])
                .build()
                .unwrap(),
            params: BTreeMap::from([
                ("(Intercept)".into(), 0.2),
                ("x".into(), 0.5),
                ("t".into(), -0.3),
                ("A".into(), 4.0),
            ]),
            groups: 20,
            units: GroupSizes::Constant(4),
            unit_generators: vec![CovariateGenerator::normal("x")],
            group_generators: vec![CovariateGenerator::binary("t", 0.5)],
            seed,
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate(&poisson_plan(7)).unwrap();
        let b = simulate(&poisson_plan(7)).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate(&poisson_plan(8)).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn shape_of_output() {
        let s = simulate(&poisson_plan(1)).unwrap();
        assert_eq!(s.data.n_groups(), 20);
        assert_eq!(s.data.n_units(), 80);
        assert_eq!(s.data.columns(), &["x".to_string(), "t".to_string()]);
        assert!(s.metadata.random_effect.contains("Gamma"));
    }

    #[test]
    fn interaction_columns_are_products() {
        let mut plan = poisson_plan(3);
        plan.unit_generators.push(CovariateGenerator::interaction("x", "t"));
        plan.spec = ModelSpec::builder(Family::Poisson)
            .intercept(true)
            .unit_covariates(["x", "x:t"])
            .group_covariates(["t"])
            .build()
            .unwrap();
        plan.params.insert("x:t".into(), 0.1);
        let s = simulate(&plan).unwrap();
        assert_eq!(s.data.columns()[1], "x:t");
        s.data.check_interactions().unwrap();
        assert!(s.data.groups().iter().flat_map(|g| g.covariates.chunks(3)).any(|r| r[1] != 0.0));
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let mut plan = poisson_plan(1);
        plan.params.insert("A".into(), -1.0);
        assert!(matches!(simulate(&plan), Err(Error::Plan(_))));
    }
}
