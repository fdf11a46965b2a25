//! Two-level datasets, model specifications and the parameter layout.
//!
//! The intercept convention: with unit-level covariates and an intercept, the
//! intercept sits inside the unit transform and the random-effect mean is
//! pinned (E μ₀ = 1 for Poisson and Gamma, λ = 0 for Gaussian). That is
//! implemented by folding the intercept into the random-effect mean, which
//! yields the same likelihood while the transform keeps η(0) = 0. Without unit
//! covariates the intercept is the intercept of the random-effect mean
//! predictor. Group covariates always enter through that mean:
//!
//! | family   | mean link                         |
//! |----------|-----------------------------------|
//! | gaussian | λᵢ = ηᵢ                           |
//! | poisson  | Bᵢ = e^{ηᵢ}/A                     |
//! | binomial | Aᵢ, Bᵢ = λᵢP, (1 − λᵢ)P, λᵢ = logistic(ηᵢ) |
//! | gamma    | Dᵢ = (C − 1)e^{ηᵢ}, C > 1         |

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::conjugacy::CovariateTransform;
use crate::error::{Error, Result};
use crate::families::{ConjugatePrior, Family, FamilyKernel};
use crate::likelihood::{self, GroupView};
use crate::special::logistic;

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: String,
    pub y: Vec<f64>,
    pub trials: Option<Vec<u32>>,
    /// Row-major, one row per unit over the dataset's columns.
    pub covariates: Vec<f64>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Units grouped by identifier, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupedDataset {
    columns: Vec<String>,
    groups: Vec<Group>,
    index: HashMap<String, usize>,
    has_trials: Option<bool>,
}

impl GroupedDataset {
    pub fn new(columns: Vec<String>) -> Self {
        GroupedDataset { columns, ..Default::default() }
    }

    pub fn push(&mut self, group: &str, y: f64, trials: Option<u32>, row: &[f64]) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Data(format!(
                "row has {} covariates, expected {}",
                row.len(),
                self.columns.len()
            )));
        }
        match self.has_trials {
            Some(has) if has != trials.is_some() => {
                return Err(Error::Data("trials must be given for every unit or for none".into()));
            }
            _ => self.has_trials = Some(trials.is_some()),
        }
        let idx = match self.index.get(group) {
            Some(&idx) => idx,
            None => {
                self.groups.push(Group {
                    id: group.to_string(),
                    y: Vec::new(),
                    trials: trials.map(|_| Vec::new()),
                    covariates: Vec::new(),
                });
                self.index.insert(group.to_string(), self.groups.len() - 1);
                self.groups.len() - 1
            }
        };
        let g = &mut self.groups[idx];
        g.y.push(y);
        if let (Some(t), Some(n)) = (g.trials.as_mut(), trials) {
            t.push(n);
        }
        g.covariates.extend_from_slice(row);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_units(&self) -> usize {
        self.groups.iter().map(Group::len).sum()
    }

    pub fn has_trials(&self) -> bool {
        self.has_trials.unwrap_or(false)
    }

    /// Replaces the responses of group `idx`.
    pub fn set_responses(&mut self, idx: usize, y: Vec<f64>) -> Result<()> {
        let g = self
            .groups
            .get_mut(idx)
            .ok_or_else(|| Error::Data(format!("no group at index {idx}")))?;
        if g.y.len() != y.len() {
            return Err(Error::Data(format!("group `{}` has {} units, got {} responses", g.id, g.y.len(), y.len())));
        }
        g.y = y;
        Ok(())
    }

    /// Checks every `a:b` column against the product of `a` and `b`.
    pub fn check_interactions(&self) -> Result<()> {
        let ncol = self.columns.len();
        for (k, name) in self.columns.iter().enumerate() {
            let parents: Vec<&str> = name.split(':').collect();
            if parents.len() < 2 {
                continue;
            }
            let Some(idx) = parents.iter().map(|p| self.column_index(p)).collect::<Option<Vec<_>>>() else {
                continue;
            };
            for g in &self.groups {
                for (j, row) in g.covariates.chunks(ncol).enumerate() {
                    let product: f64 = idx.iter().map(|&i| row[i]).product();
                    if (row[k] - product).abs() > 1e-9 * product.abs().max(1.0) {
                        return Err(Error::Data(format!(
                            "interaction `{name}` in group `{}` unit {} is {}, but its parents multiply to {product}",
                            g.id,
                            j + 1,
                            row[k]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// What is being fitted: the family, its covariates and which hyperparameters
/// are fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    family: Family,
    unit_covariates: Vec<String>,
    group_covariates: Vec<String>,
    intercept: bool,
    variance: Option<f64>,
    shape: Option<f64>,
    trials: u32,
    estimate_dispersion: bool,
    fixed: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct ModelSpecBuilder {
    spec: ModelSpec,
}

impl ModelSpec {
    pub fn builder(family: Family) -> ModelSpecBuilder {
        ModelSpecBuilder {
            spec: ModelSpec {
                family,
                unit_covariates: Vec::new(),
                group_covariates: Vec::new(),
                intercept: false,
                variance: None,
                shape: None,
                trials: 1,
                estimate_dispersion: false,
                fixed: BTreeMap::new(),
            },
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn unit_covariates(&self) -> &[String] {
        &self.unit_covariates
    }

    pub fn group_covariates(&self) -> &[String] {
        &self.group_covariates
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    pub fn is_unit_level(&self) -> bool {
        !self.unit_covariates.is_empty()
    }

    pub fn variance(&self) -> Option<f64> {
        self.variance
    }

    pub fn shape(&self) -> Option<f64> {
        self.shape
    }

    pub fn trials(&self) -> u32 {
        self.trials
    }

    pub fn estimate_dispersion(&self) -> bool {
        self.estimate_dispersion
    }

    pub fn fixed(&self) -> &BTreeMap<String, f64> {
        &self.fixed
    }

    /// Whether the random-effect mean follows a linear predictor rather than
    /// being a free shared hyperparameter.
    pub fn mean_linked(&self) -> bool {
        self.intercept || !self.group_covariates.is_empty()
    }
}

impl ModelSpecBuilder {
    pub fn unit_covariates<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.spec.unit_covariates = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn group_covariates<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.spec.group_covariates = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn intercept(mut self, yes: bool) -> Self {
        self.spec.intercept = yes;
        self
    }

    /// Gaussian response variance σ² (the starting value when it is estimated).
    pub fn variance(mut self, variance: f64) -> Self {
        self.spec.variance = Some(variance);
        self
    }

    /// Gamma response shape A (the starting value when it is estimated).
    pub fn shape(mut self, shape: f64) -> Self {
        self.spec.shape = Some(shape);
        self
    }

    /// Binomial trials used when the data carry none.
    pub fn trials(mut self, trials: u32) -> Self {
        self.spec.trials = trials;
        self
    }

    /// Estimate Gaussian σ² or Gamma A instead of treating it as known.
    pub fn estimate_dispersion(mut self, yes: bool) -> Self {
        self.spec.estimate_dispersion = yes;
        self
    }

    pub fn fix(mut self, name: impl Into<String>, value: f64) -> Self {
        self.spec.fixed.insert(name.into(), value);
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let spec = self.spec;
        if !spec.unit_covariates.is_empty() && !spec.family.supports_unit_covariates() {
            return Err(Error::BinomialUnitLevel);
        }
        let mut seen = std::collections::HashSet::new();
        for name in spec.unit_covariates.iter().chain(&spec.group_covariates) {
            if name == INTERCEPT {
                return Err(Error::Model(format!("`{INTERCEPT}` is reserved; use the intercept flag")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Model(format!("covariate `{name}` is listed more than once")));
            }
        }
        match spec.family {
            Family::Gaussian if spec.variance.is_none() && !spec.estimate_dispersion => {
                return Err(Error::Model("gaussian models need a known variance or estimate_dispersion".into()));
            }
            Family::Gamma if spec.shape.is_none() && !spec.estimate_dispersion => {
                return Err(Error::Model("gamma models need a known shape or estimate_dispersion".into()));
            }
            Family::Poisson | Family::Binomial if spec.estimate_dispersion => {
                return Err(Error::Model(format!("the {} family has no dispersion to estimate", spec.family)));
            }
            _ => {}
        }
        if spec.family == Family::Binomial && spec.trials == 0 {
            return Err(Error::Model("binomial trials must be at least 1".into()));
        }
        for (name, value) in [("variance", spec.variance), ("shape", spec.shape)] {
            if let Some(v) = value {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Model(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(spec)
    }
}

/// Map between a natural-scale parameter and the unconstrained optimization scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Transform {
    Identity,
    /// natural = e^w
    Log,
    /// natural = lower + e^w
    LogAbove(f64),
}

impl Transform {
    pub fn to_natural(&self, w: f64) -> f64 {
        match *self {
            Transform::Identity => w,
            Transform::Log => w.exp(),
            Transform::LogAbove(lower) => lower + w.exp(),
        }
    }

    pub fn to_unconstrained(&self, v: f64) -> Option<f64> {
        match *self {
            Transform::Identity => Some(v),
            Transform::Log => (v > 0.0).then(|| v.ln()),
            Transform::LogAbove(lower) => (v > lower).then(|| (v - lower).ln()),
        }
    }

    /// d natural / d w.
    pub fn derivative(&self, w: f64) -> f64 {
        match *self {
            Transform::Identity => 1.0,
            Transform::Log | Transform::LogAbove(_) => w.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    Intercept,
    UnitCoef(usize),
    GroupCoef(usize),
    /// Gaussian random-effect mean λ.
    Lambda,
    /// Gaussian random-effect variance κ².
    Kappa2,
    /// Gaussian response variance σ².
    Sigma2,
    /// Poisson gamma-shape A; binomial beta shape A (free mean).
    PriorShape,
    /// Poisson gamma-scale B; binomial beta shape B (free mean).
    PriorScale,
    /// Binomial beta precision A + B (linked mean).
    Precision,
    /// Gamma inverse-gamma shape C.
    InvShape,
    /// Gamma inverse-gamma scale D.
    InvScale,
    /// Gamma response shape A.
    ResponseShape,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSlot {
    pub name: String,
    pub role: Role,
    pub transform: Transform,
    pub fixed: Option<f64>,
}

/// Ordered parameters of a model and the subset being estimated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    free: Vec<usize>,
}

impl ParamLayout {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let mut slots = Vec::new();
        let mut push = |name: &str, role, transform| {
            slots.push(ParamSlot { name: name.to_string(), role, transform, fixed: None })
        };
        if spec.intercept {
            push(INTERCEPT, Role::Intercept, Transform::Identity);
        }
        for (k, name) in spec.unit_covariates.iter().enumerate() {
            push(name, Role::UnitCoef(k), Transform::Identity);
        }
        for (k, name) in spec.group_covariates.iter().enumerate() {
            push(name, Role::GroupCoef(k), Transform::Identity);
        }
        let linked = spec.mean_linked();
        match spec.family {
            Family::Gaussian => {
                if !linked {
                    push("lambda", Role::Lambda, Transform::Identity);
                }
                push("kappa2", Role::Kappa2, Transform::Log);
                push("sigma2", Role::Sigma2, Transform::Log);
            }
            Family::Poisson => {
                push("A", Role::PriorShape, Transform::Log);
                if !linked {
                    push("B", Role::PriorScale, Transform::Log);
                }
            }
            Family::Binomial => {
                if linked {
                    push("precision", Role::Precision, Transform::Log);
                } else {
                    push("A", Role::PriorShape, Transform::Log);
                    push("B", Role::PriorScale, Transform::Log);
                }
            }
            Family::Gamma => {
                push("C", Role::InvShape, if linked { Transform::LogAbove(1.0) } else { Transform::Log });
                if !linked {
                    push("D", Role::InvScale, Transform::Log);
                }
                push("A", Role::ResponseShape, Transform::Log);
            }
        }
        for slot in &mut slots {
            match slot.role {
                Role::Sigma2 if !spec.estimate_dispersion => slot.fixed = spec.variance,
                Role::ResponseShape if !spec.estimate_dispersion => slot.fixed = spec.shape,
                _ => {}
            }
        }
        for (name, &value) in &spec.fixed {
            let slot = slots
                .iter_mut()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if slot.transform.to_unconstrained(value).is_none() || !value.is_finite() {
                if slot.role == Role::InvShape {
                    return Err(Error::MeanUndefined(value));
                }
                return Err(Error::Model(format!("fixed value {value} is outside the domain of `{name}`")));
            }
            slot.fixed = Some(value);
        }
        let free = (0..slots.len()).filter(|&i| slots[i].fixed.is_none()).collect();
        Ok(ParamLayout { slots, free })
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    /// Unconstrained vector of the free parameters.
    pub fn pack(&self, natural: &[f64]) -> Result<Vec<f64>> {
        if natural.len() != self.slots.len() {
            return Err(Error::Model(format!("expected {} parameters, got {}", self.slots.len(), natural.len())));
        }
        self.free
            .iter()
            .map(|&i| {
                let slot = &self.slots[i];
                let v = natural[i];
                if !v.is_finite() {
                    return Err(Error::NonFinite { name: slot.name.clone(), value: v });
                }
                slot.transform.to_unconstrained(v).ok_or_else(|| {
                    if slot.role == Role::InvShape && slot.transform != Transform::Log {
                        Error::MeanUndefined(v)
                    } else {
                        Error::Model(format!("value {v} is outside the domain of `{}`", slot.name))
                    }
                })
            })
            .collect()
    }

    /// Natural-scale values of every parameter, fixed ones included.
    pub fn unpack(&self, free: &[f64]) -> Result<Vec<f64>> {
        if free.len() != self.free.len() {
            return Err(Error::Model(format!("expected {} free parameters, got {}", self.free.len(), free.len())));
        }
        let mut natural: Vec<f64> = self.slots.iter().map(|s| s.fixed.unwrap_or(f64::NAN)).collect();
        for (&i, &w) in self.free.iter().zip(free) {
            if !w.is_finite() {
                return Err(Error::NonFinite { name: self.slots[i].name.clone(), value: w });
            }
            natural[i] = self.slots[i].transform.to_natural(w);
        }
        Ok(natural)
    }

    /// d natural / d unconstrained for each free parameter.
    pub fn jacobian(&self, free: &[f64]) -> Vec<f64> {
        self.free.iter().zip(free).map(|(&i, &w)| self.slots[i].transform.derivative(w)).collect()
    }

    /// Natural vector from named values; fixed parameters may be omitted.
    pub fn natural_from_map(&self, values: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        for name in values.keys() {
            if self.index_of(name).is_none() {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        self.slots
            .iter()
            .map(|s| match (values.get(&s.name), s.fixed) {
                (Some(&v), _) => Ok(v),
                (None, Some(v)) => Ok(v),
                (None, None) => Err(Error::Model(format!("no value given for parameter `{}`", s.name))),
            })
            .collect()
    }

    pub fn to_map(&self, natural: &[f64]) -> BTreeMap<String, f64> {
        self.slots.iter().zip(natural).map(|(s, &v)| (s.name.clone(), v)).collect()
    }

    fn value(&self, natural: &[f64], role: Role) -> f64 {
        self.slots
            .iter()
            .position(|s| s.role == role)
            .map(|i| natural[i])
            .unwrap_or_else(|| panic!("parameter layout has no {role:?} slot"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundGroup {
    pub id: String,
    pub y: Vec<f64>,
    pub trials: Option<Vec<u32>>,
    /// Row-major unit design over the model's unit covariates.
    pub x: Vec<f64>,
    pub group_x: Vec<f64>,
}

impl BoundGroup {
    pub fn view(&self, ncols: usize) -> GroupView<'_> {
        GroupView { y: &self.y, trials: self.trials.as_deref(), x: &self.x, ncols }
    }
}

/// A model specification validated against a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundModel {
    spec: ModelSpec,
    layout: ParamLayout,
    groups: Vec<BoundGroup>,
}

/// Numeric ids compare numerically, everything else lexically after them.
fn natural_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Validates `spec` against `data` and extracts per-unit and per-group designs.
pub fn bind(spec: &ModelSpec, data: &GroupedDataset) -> Result<BoundModel> {
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| data.column_index(n).ok_or_else(|| Error::UnknownCovariate(n.clone())))
            .collect()
    };
    let unit_idx = resolve(&spec.unit_covariates)?;
    let group_idx = resolve(&spec.group_covariates)?;
    let layout = ParamLayout::from_spec(spec)?;
    let ncol = data.columns().len();

    let base_kernel = match spec.family {
        Family::Gaussian => FamilyKernel::gaussian(spec.variance.unwrap_or(1.0))?,
        Family::Poisson => FamilyKernel::poisson(),
        Family::Binomial => FamilyKernel::binomial(spec.trials)?,
        Family::Gamma => FamilyKernel::gamma(spec.shape.unwrap_or(1.0))?,
    };

    let mut groups = Vec::with_capacity(data.n_groups());
    for g in data.groups() {
        let rows: Vec<&[f64]> = if ncol == 0 {
            vec![&[]; g.len()]
        } else {
            g.covariates.chunks(ncol).collect()
        };
        for (j, &y) in g.y.iter().enumerate() {
            let trials = g.trials.as_ref().map(|t| t[j]).unwrap_or(spec.trials);
            let kernel = base_kernel.with_trials(trials)?;
            kernel
                .check_support(y)
                .map_err(|e| Error::Data(format!("group `{}` unit {}: {e}", g.id, j + 1)))?;
        }
        let mut x = Vec::with_capacity(g.len() * unit_idx.len());
        for (j, row) in rows.iter().enumerate() {
            for &k in &unit_idx {
                let v = row[k];
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "group `{}` unit {}: covariate `{}` is {v}",
                        g.id,
                        j + 1,
                        data.columns()[k]
                    )));
                }
                x.push(v);
            }
        }
        let mut group_x = Vec::with_capacity(group_idx.len());
        for &k in &group_idx {
            let first = rows.first().map(|r| r[k]).unwrap_or(0.0);
            if !first.is_finite() {
                return Err(Error::Data(format!("group `{}`: covariate `{}` is {first}", g.id, data.columns()[k])));
            }
            if rows.iter().any(|r| r[k] != first) {
                return Err(Error::GroupConstancy { column: data.columns()[k].clone(), group: g.id.clone() });
            }
            group_x.push(first);
        }
        groups.push(BoundGroup { id: g.id.clone(), y: g.y.clone(), trials: g.trials.clone(), x, group_x });
    }
    // canonical order, so results do not depend on the order groups appear in
    groups.sort_by(|a, b| natural_order(&a.id, &b.id));
    Ok(BoundModel { spec: spec.clone(), layout, groups })
}

impl BoundModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn groups(&self) -> &[BoundGroup] {
        &self.groups
    }

    pub fn n_units(&self) -> usize {
        self.groups.iter().map(|g| g.y.len()).sum()
    }

    pub fn n_unit_covariates(&self) -> usize {
        self.spec.unit_covariates.len()
    }

    /// The same model with one more parameter held fixed.
    pub fn with_fixed(&self, name: &str, value: f64) -> Result<BoundModel> {
        let mut spec = self.spec.clone();
        spec.fixed.insert(name.to_string(), value);
        let layout = ParamLayout::from_spec(&spec)?;
        Ok(BoundModel { spec, layout, groups: self.groups.clone() })
    }

    /// The same data under a different specification over the same covariates.
    pub fn respecified(&self, spec: ModelSpec) -> Result<BoundModel> {
        if spec.unit_covariates != self.spec.unit_covariates || spec.group_covariates != self.spec.group_covariates {
            return Err(Error::Model("respecified model must keep the covariates".into()));
        }
        let layout = ParamLayout::from_spec(&spec)?;
        Ok(BoundModel { spec, layout, groups: self.groups.clone() })
    }

    /// Response kernel at the given natural parameters.
    pub fn kernel(&self, natural: &[f64]) -> Result<FamilyKernel> {
        match self.spec.family {
            Family::Gaussian => FamilyKernel::gaussian(self.layout.value(natural, Role::Sigma2)),
            Family::Poisson => Ok(FamilyKernel::poisson()),
            Family::Binomial => FamilyKernel::binomial(self.spec.trials),
            Family::Gamma => FamilyKernel::gamma(self.layout.value(natural, Role::ResponseShape)),
        }
    }

    /// Unit-level transform (without the intercept), or `None` for a group-level model.
    pub fn transform(&self, natural: &[f64]) -> Result<Option<CovariateTransform>> {
        if !self.spec.is_unit_level() {
            return Ok(None);
        }
        let beta = self
            .layout
            .slots
            .iter()
            .zip(natural)
            .filter(|(s, _)| matches!(s.role, Role::UnitCoef(_)))
            .map(|(_, &v)| v)
            .collect();
        CovariateTransform::linear(self.spec.family, beta).map(Some)
    }

    /// Linear predictor of the random-effect mean for group `i`.
    fn mean_predictor(&self, natural: &[f64], i: usize) -> f64 {
        let g = &self.groups[i];
        let mut eta = 0.0;
        for (slot, &v) in self.layout.slots.iter().zip(natural) {
            match slot.role {
                Role::Intercept => {
                    // μ(x) = μ₀/ζ(x) puts a Gamma unit-level intercept on the reciprocal scale.
                    let sign = if self.spec.family == Family::Gamma && self.spec.is_unit_level() { -1.0 } else { 1.0 };
                    eta += sign * v;
                }
                Role::GroupCoef(k) => eta += v * g.group_x[k],
                _ => {}
            }
        }
        eta
    }

    /// Conjugate random-effect distribution of group `i`.
    pub fn group_prior(&self, natural: &[f64], i: usize) -> Result<ConjugatePrior> {
        let l = &self.layout;
        let linked = self.spec.mean_linked();
        let eta = if linked { self.mean_predictor(natural, i) } else { 0.0 };
        match self.spec.family {
            Family::Gaussian => {
                let lambda = if linked { eta } else { l.value(natural, Role::Lambda) };
                ConjugatePrior::gaussian(lambda, l.value(natural, Role::Kappa2))
            }
            Family::Poisson => {
                let a = l.value(natural, Role::PriorShape);
                let b = if linked { eta.exp() / a } else { l.value(natural, Role::PriorScale) };
                ConjugatePrior::poisson(a, b)
            }
            Family::Binomial => {
                if linked {
                    let m = logistic(eta);
                    let p = l.value(natural, Role::Precision);
                    ConjugatePrior::binomial(m * p, (1.0 - m) * p)
                } else {
                    ConjugatePrior::binomial(l.value(natural, Role::PriorShape), l.value(natural, Role::PriorScale))
                }
            }
            Family::Gamma => {
                let c = l.value(natural, Role::InvShape);
                let d = if linked {
                    if c <= 1.0 {
                        return Err(Error::MeanUndefined(c));
                    }
                    (c - 1.0) * eta.exp()
                } else {
                    l.value(natural, Role::InvScale)
                };
                ConjugatePrior::gamma(c, d)
            }
        }
    }

    /// Total marginal log-likelihood at natural-scale parameters.
    pub fn loglik(&self, natural: &[f64]) -> Result<f64> {
        likelihood::total_loglik(self, natural)
    }

    /// Total marginal log-likelihood at an unconstrained free-parameter vector.
    pub fn loglik_free(&self, free: &[f64]) -> Result<f64> {
        self.loglik(&self.layout.unpack(free)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_dataset() -> GroupedDataset {
        let mut d = GroupedDataset::new(vec!["x".into(), "g".into(), "x:g".into()]);
        d.push("a", 1.0, None, &[0.5, 1.0, 0.5]).unwrap();
        d.push("a", 2.0, None, &[-0.5, 1.0, -0.5]).unwrap();
        d.push("b", 0.0, None, &[1.5, 0.0, 0.0]).unwrap();
        d
    }

    #[test]
    fn dataset_groups_by_first_appearance() {
        let d = toy_dataset();
        assert_eq!(d.n_groups(), 2);
        assert_eq!(d.n_units(), 3);
        assert_eq!(d.groups()[0].id, "a");
        assert!(d.check_interactions().is_ok());
    }

    #[test]
    fn broken_interaction_is_reported() {
        let mut d = toy_dataset();
        d.push("b", 1.0, None, &[1.0, 0.0, 2.0]).unwrap();
        assert!(matches!(d.check_interactions(), Err(Error::Data(_))));
    }

    #[test]
    fn binomial_unit_covariates_rejected_at_construction() {
        let err = ModelSpec::builder(Family::Binomial).unit_covariates(["x"]).build().unwrap_err();
        assert!(matches!(err, Error::BinomialUnitLevel));
    }

    #[test]
    fn unknown_covariate_is_rejected() {
        let spec = ModelSpec::builder(Family::Poisson).unit_covariates(["nope"]).build().unwrap();
        assert!(matches!(bind(&spec, &toy_dataset()), Err(Error::UnknownCovariate(n)) if n == "nope"));
    }

    #[test]
    fn group_covariate_must_be_constant() {
        let spec = ModelSpec::builder(Family::Poisson).group_covariates(["x"]).build().unwrap();
        assert!(matches!(bind(&spec, &toy_dataset()), Err(Error::GroupConstancy { .. })));
        let spec = ModelSpec::builder(Family::Poisson).group_covariates(["g"]).build().unwrap();
        assert!(bind(&spec, &toy_dataset()).is_ok());
    }

    #[test]
    fn support_violation_names_the_row() {
        let spec = ModelSpec::builder(Family::Gamma).shape(1.0).build().unwrap();
        let err = bind(&spec, &toy_dataset()).unwrap_err();
        assert!(err.to_string().contains("group `b` unit 1"), "{err}");
    }

    #[test]
    fn poisson_intercept_pins_random_effect_mean() {
        let spec = ModelSpec::builder(Family::Poisson).unit_covariates(["x"]).intercept(true).build().unwrap();
        let bound = bind(&spec, &toy_dataset()).unwrap();
        let names: Vec<_> = bound.layout().names().collect();
        assert_eq!(names, [INTERCEPT, "x", "A"]);
        let prior = bound.group_prior(&[0.0, 0.3, 2.5], 0).unwrap();
        let (a, b) = prior.family_params();
        assert!((a * b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_linked_mean_needs_c_above_one() {
        let spec = ModelSpec::builder(Family::Gamma).shape(2.0).intercept(true).fix("C", 0.5).build().unwrap();
        assert!(matches!(bind(&spec, &toy_dataset().clone()), Err(Error::MeanUndefined(_)) | Err(Error::Data(_))));
        let layout = ParamLayout::from_spec(&spec);
        assert!(matches!(layout, Err(Error::MeanUndefined(c)) if c == 0.5));
    }

    #[test]
    fn pack_examples() {
        let spec = ModelSpec::builder(Family::Gamma).estimate_dispersion(true).shape(1.0).build().unwrap();
        let layout = ParamLayout::from_spec(&spec).unwrap();
        let names: Vec<_> = layout.names().collect();
        assert_eq!(names, ["C", "D", "A"]);
        assert_eq!(layout.pack(&[2.0, 3.0, 1.0]).unwrap()[2], 0.0);

        let spec = ModelSpec::builder(Family::Gaussian).variance(1.0).build().unwrap();
        let layout = ParamLayout::from_spec(&spec).unwrap();
        assert_eq!(layout.n_free(), 2);
        assert_eq!(layout.pack(&[0.3, 1.0, 1.0]).unwrap(), vec![0.3, 0.0]);
        assert!(matches!(layout.pack(&[f64::NAN, 1.0, 1.0]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn fixing_an_unknown_parameter_fails() {
        let spec = ModelSpec::builder(Family::Poisson).fix("zzz", 1.0).build().unwrap();
        assert!(matches!(ParamLayout::from_spec(&spec), Err(Error::UnknownParameter(_))));
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(
            beta in prop::collection::vec(-5.0f64..5.0, 2),
            a in 1e-3f64..1e3,
            c in 1.001f64..1e3,
        ) {
            let spec = ModelSpec::builder(Family::Gamma)
                .unit_covariates(["x", "g"])
                .intercept(true)
                .estimate_dispersion(true)
                .shape(1.0)
                .build()
                .unwrap();
            let layout = ParamLayout::from_spec(&spec).unwrap();
            let natural = vec![0.25, beta[0], beta[1], c, a];
            let back = layout.unpack(&layout.pack(&natural).unwrap()).unwrap();
            for (x, y) in natural.iter().zip(&back) {
                prop_assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
}
