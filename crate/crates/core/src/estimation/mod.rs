//! Maximum-likelihood estimation on the closed-form total log-likelihood.
//!
//! Free parameters are optimized on an unconstrained scale (logs of positive
//! quantities). Standard errors come from a finite-difference observed
//! information on that scale, mapped back by the delta method.

mod glm;
mod optimize;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::Family;
use crate::model::{BoundModel, Role};
use crate::special::logistic;

pub use glm::{glm_fit, GlmFit};
pub use optimize::{minimize, nelder_mead, numerical_gradient, numerical_hessian, relative_gradient, Minimum, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Largest relative gradient component at convergence.
    pub grad_tol: f64,
    /// Extra starts from jittered initial values; the best optimum is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 500, rel_tol: 1e-10, grad_tol: 1e-7, restarts: 0, seed: 0 }
    }
}

impl FitOptions {
    fn tolerances(&self) -> Tolerances {
        Tolerances { max_iter: self.max_iter, rel_tol: self.rel_tol, grad_tol: self.grad_tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub fixed: bool,
}

/// Eigen-structure of the observed information on the unconstrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Conditioning {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// min / max eigenvalue.
    pub ratio: f64,
    pub positive_definite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub parameters: Vec<ParameterEstimate>,
    pub loglik: f64,
    pub iterations: usize,
    /// Optimizer converged and the observed information is positive definite.
    pub converged: bool,
    pub gradient_norm: f64,
    pub condition: Option<Conditioning>,
    pub warnings: Vec<String>,
    /// Free parameters on the unconstrained scale.
    pub optimum: Vec<f64>,
    /// Every parameter on the natural scale, in layout order.
    pub natural: Vec<f64>,
}

impl FitResult {
    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.parameters.iter().find(|p| p.name == name).map(|p| p.estimate)
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.parameters.iter().find(|p| p.name == name).and_then(|p| p.std_error)
    }

    pub fn estimates(&self) -> BTreeMap<String, f64> {
        self.parameters.iter().map(|p| (p.name.clone(), p.estimate)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrors {
    /// Natural-scale SEs in layout order; `None` for fixed parameters or a
    /// singular information matrix.
    pub natural: Vec<Option<f64>>,
    pub condition: Conditioning,
}

/// SEs on the optimization scale from the Hessian of the negative
/// log-likelihood. `noise` is the eigenvalue level indistinguishable from zero.
pub fn covariance_from_hessian(hessian: &DMatrix<f64>, noise: f64) -> (Option<DMatrix<f64>>, Conditioning) {
    let eig = hessian.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratio = if max > 0.0 { min / max } else { f64::NAN };
    let positive_definite = min.is_finite() && min > noise.max(1e-8 * max) && max > 0.0;
    let condition = Conditioning { min_eigenvalue: min, max_eigenvalue: max, ratio, positive_definite };
    if !positive_definite {
        return (None, condition);
    }
    (hessian.clone().try_inverse(), condition)
}

fn objective(bound: &BoundModel) -> impl Fn(&[f64]) -> f64 + '_ {
    move |w: &[f64]| match bound.loglik_free(w) {
        Ok(v) if v.is_finite() => -v,
        _ => f64::INFINITY,
    }
}

/// Observed-information standard errors at an unconstrained optimum.
pub fn standard_errors(bound: &BoundModel, optimum: &[f64]) -> Result<StandardErrors> {
    let layout = bound.layout();
    let f = objective(bound);
    let f0 = f(optimum);
    if !f0.is_finite() {
        return Err(Error::Model("log-likelihood is not finite at the optimum".into()));
    }
    let hessian = numerical_hessian(&f, optimum);
    if hessian.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("observed information has non-finite entries".into()));
    }
    let h_min = optimum.iter().map(|w| (1e-4 * w.abs()).max(1e-4)).fold(f64::INFINITY, f64::min);
    let noise = 100.0 * f64::EPSILON * f0.abs().max(1.0) / (h_min * h_min);
    let (cov, condition) = covariance_from_hessian(&hessian, noise);
    let mut natural = vec![None; layout.len()];
    if let Some(cov) = cov {
        let jac = layout.jacobian(optimum);
        for (k, &i) in layout.free_indices().iter().enumerate() {
            let var = cov[(k, k)];
            natural[i] = (var > 0.0).then(|| jac[k].abs() * var.sqrt());
        }
    }
    Ok(StandardErrors { natural, condition })
}

fn design_rows(bound: &BoundModel) -> (Vec<f64>, usize, bool) {
    let spec = bound.spec();
    let constant = spec.intercept() || !spec.mean_linked();
    let gamma_unit = spec.family() == Family::Gamma && spec.is_unit_level();
    let nu = bound.n_unit_covariates();
    let ng = spec.group_covariates().len();
    let ncols = usize::from(constant) + nu + ng;
    let mut design = Vec::with_capacity(bound.n_units() * ncols);
    for g in bound.groups() {
        for j in 0..g.y.len() {
            if constant {
                // a unit-level Gamma intercept acts on the reciprocal of the mean
                design.push(if gamma_unit && spec.intercept() { -1.0 } else { 1.0 });
            }
            for k in 0..nu {
                let v = g.x[j * nu + k];
                design.push(if gamma_unit { -v } else { v });
            }
            design.extend_from_slice(&g.group_x);
        }
    }
    (design, ncols, constant)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Deterministic starting values: a pooled GLM for the regression part, then
/// method-of-moments heterogeneity from the dispersion of group totals.
pub fn default_init(bound: &BoundModel) -> Result<Vec<f64>> {
    let spec = bound.spec();
    let layout = bound.layout();
    let family = spec.family();
    let (design, ncols, constant) = design_rows(bound);
    let y: Vec<f64> = bound.groups().iter().flat_map(|g| g.y.iter().copied()).collect();
    let trials: Vec<u32> = bound
        .groups()
        .iter()
        .flat_map(|g| match &g.trials {
            Some(t) => t.clone(),
            None => vec![spec.trials(); g.y.len()],
        })
        .collect();
    let glm = glm_fit(family, &design, ncols, &y, (family == Family::Binomial).then_some(&trials[..]))?;
    let coef = &glm.coefficients;
    let offset = usize::from(constant);
    let c0 = if constant { coef[0] } else { 0.0 };

    // per-group observed and expected totals
    let mut cursor = 0;
    let mut totals = Vec::new();
    for g in bound.groups() {
        let n = g.y.len();
        if n == 0 {
            continue;
        }
        let fitted = &glm.fitted[cursor..cursor + n];
        let observed: f64 = g.y.iter().sum();
        let expected: f64 = match family {
            Family::Binomial => fitted.iter().zip(&trials[cursor..cursor + n]).map(|(p, &t)| p * f64::from(t)).sum(),
            _ => fitted.iter().sum(),
        };
        totals.push((g, fitted.to_vec(), observed, expected, cursor));
        cursor += n;
    }
    let n_bar = bound.n_units() as f64 / totals.len().max(1) as f64;

    let mut natural = vec![0.0; layout.len()];
    for (i, slot) in layout.slots().iter().enumerate() {
        natural[i] = match slot.role {
            Role::Intercept => c0,
            Role::UnitCoef(k) => coef[offset + k],
            Role::GroupCoef(k) => coef[offset + bound.n_unit_covariates() + k],
            _ => f64::NAN,
        };
    }
    let set = |natural: &mut Vec<f64>, role: Role, value: f64| {
        if let Some(i) = layout.slots().iter().position(|s| s.role == role) {
            natural[i] = layout.slots()[i].fixed.unwrap_or(value);
        }
    };
    match family {
        Family::Gaussian => {
            let resid: Vec<Vec<f64>> =
                totals.iter().map(|(g, fit, ..)| g.y.iter().zip(fit).map(|(y, m)| y - m).collect()).collect();
            let means: Vec<f64> = resid.iter().map(|r| mean(r.iter().copied())).collect();
            let within: f64 = resid.iter().zip(&means).flat_map(|(r, m)| r.iter().map(move |v| (v - m).powi(2))).sum();
            let dof = bound.n_units().saturating_sub(totals.len()).max(1) as f64;
            let sigma2 = layout
                .index_of("sigma2")
                .and_then(|i| layout.slots()[i].fixed)
                .unwrap_or_else(|| (within / dof).max(1e-6));
            let grand = mean(means.iter().copied());
            let between = mean(means.iter().map(|m| (m - grand).powi(2)));
            let kappa2 = (between - sigma2 / n_bar).max(0.05 * between).max(1e-4 * sigma2).max(1e-8);
            set(&mut natural, Role::Sigma2, sigma2);
            set(&mut natural, Role::Kappa2, kappa2);
            set(&mut natural, Role::Lambda, c0);
        }
        Family::Poisson => {
            let excess = mean(totals.iter().map(|(_, _, o, e, _)| ((o - e).powi(2) - o) / (e * e).max(1e-12)));
            let a = (1.0 / excess.max(1e-4)).clamp(0.1, 1e4);
            set(&mut natural, Role::PriorShape, a);
            set(&mut natural, Role::PriorScale, c0.exp() / a);
        }
        Family::Binomial => {
            let ratio = mean(totals.iter().map(|(g, fit, o, e, start)| {
                let n: f64 = (0..g.y.len()).map(|j| f64::from(trials[start + j])).sum();
                let p = fit.iter().sum::<f64>() / fit.len() as f64;
                (o - e).powi(2) / (n * p * (1.0 - p)).max(1e-12)
            }));
            let total_trials = mean(totals.iter().map(|(g, _, _, _, start)| {
                (0..g.y.len()).map(|j| f64::from(trials[start + j])).sum::<f64>()
            }));
            let rho = if total_trials > 1.0 { ((ratio - 1.0) / (total_trials - 1.0)).clamp(1e-4, 0.9) } else { 0.1 };
            let precision = (1.0 / rho - 1.0).clamp(0.1, 1e4);
            let m = logistic(c0);
            set(&mut natural, Role::Precision, precision);
            set(&mut natural, Role::PriorShape, m * precision);
            set(&mut natural, Role::PriorScale, (1.0 - m) * precision);
        }
        Family::Gamma => {
            let mut within = Vec::new();
            let mut group_ratios = Vec::new();
            for (g, fit, ..) in &totals {
                let r: Vec<f64> = g.y.iter().zip(fit).map(|(y, m)| y / m).collect();
                let rm = mean(r.iter().copied());
                group_ratios.push(rm);
                if r.len() > 1 {
                    let v = r.iter().map(|x| (x / rm - 1.0).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
                    within.push(v);
                }
            }
            let shape = layout
                .slots()
                .iter()
                .find(|s| s.role == Role::ResponseShape)
                .and_then(|s| s.fixed)
                .unwrap_or_else(|| (1.0 / mean(within.iter().copied()).max(1e-4)).clamp(0.1, 1e4));
            let gm = mean(group_ratios.iter().copied());
            let between = mean(group_ratios.iter().map(|r| (r / gm - 1.0).powi(2))) - 1.0 / (shape * n_bar);
            let c = (2.0 + 1.0 / between.max(1e-4)).clamp(2.5, 1e4);
            set(&mut natural, Role::ResponseShape, shape);
            set(&mut natural, Role::InvShape, c);
            set(&mut natural, Role::InvScale, (c - 1.0) * c0.exp());
        }
    }
    for (slot, v) in layout.slots().iter().zip(natural.iter_mut()) {
        if let Some(fixed) = slot.fixed {
            *v = fixed;
        }
        if !v.is_finite() {
            return Err(Error::Model(format!("could not initialize `{}`", slot.name)));
        }
    }
    Ok(natural)
}

fn single_start(bound: &BoundModel, start: &[f64], options: &FitOptions) -> Minimum {
    let f = objective(bound);
    minimize(&f, start, &options.tolerances())
}

/// Maximizes the total log-likelihood. `init` holds natural-scale values for
/// every parameter in layout order (fixed entries are ignored); `None` uses
/// [`default_init`].
pub fn fit(bound: &BoundModel, init: Option<&[f64]>, options: &FitOptions) -> Result<FitResult> {
    let layout = bound.layout();
    let natural0 = match init {
        Some(v) => v.to_vec(),
        None => default_init(bound)?,
    };
    let w0 = layout.pack(&natural0)?;
    let start_ll = bound.loglik_free(&w0)?;
    if !start_ll.is_finite() {
        return Err(Error::Model(format!("log-likelihood is {start_ll} at the initial values")));
    }
    let mut warnings = Vec::new();

    if w0.is_empty() {
        let natural = layout.unpack(&w0)?;
        return Ok(FitResult {
            parameters: layout
                .slots()
                .iter()
                .zip(&natural)
                .map(|(s, &v)| ParameterEstimate { name: s.name.clone(), estimate: v, std_error: None, fixed: true })
                .collect(),
            loglik: start_ll,
            iterations: 0,
            converged: true,
            gradient_norm: 0.0,
            condition: None,
            warnings,
            optimum: w0,
            natural,
        });
    }

    let mut best = single_start(bound, &w0, options);
    if options.restarts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        for k in 0..options.restarts {
            let jittered: Vec<f64> = w0
                .iter()
                .map(|w| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    w + 0.5 * z
                })
                .collect();
            let candidate = single_start(bound, &jittered, options);
            log::debug!("restart {}: loglik {:.8}, converged {}", k + 1, -candidate.f, candidate.converged);
            let better = match (candidate.converged, best.converged) {
                (true, false) => true,
                (false, true) => false,
                _ => candidate.f < best.f,
            };
            if better {
                best = candidate;
            }
        }
    }
    if best.used_simplex {
        warnings.push("line search stalled; the simplex fallback was used".to_string());
    }

    let natural = layout.unpack(&best.x)?;
    let mut result = FitResult {
        parameters: Vec::new(),
        loglik: -best.f,
        iterations: best.iterations,
        converged: best.converged,
        gradient_norm: best.gradient_norm,
        condition: None,
        warnings,
        optimum: best.x.clone(),
        natural: natural.clone(),
    };
    let ses = if best.converged {
        let ses = standard_errors(bound, &best.x)?;
        result.condition = Some(ses.condition);
        if !ses.condition.positive_definite {
            let msg = format!(
                "observed information is not positive definite (eigenvalues {:.3e} to {:.3e}); standard errors omitted",
                ses.condition.min_eigenvalue, ses.condition.max_eigenvalue
            );
            log::warn!("{msg}");
            result.warnings.push(msg);
            result.converged = false;
        }
        ses.natural
    } else {
        vec![None; layout.len()]
    };
    result.parameters = layout
        .slots()
        .iter()
        .zip(&natural)
        .zip(ses)
        .map(|((s, &v), se)| ParameterEstimate {
            name: s.name.clone(),
            estimate: v,
            std_error: se,
            fixed: s.fixed.is_some(),
        })
        .collect();
    if !best.converged {
        return Err(Error::NotConverged { best: Box::new(result) });
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfilePoint {
    pub value: f64,
    pub loglik: f64,
}

/// Log-likelihood maximized over the other parameters at each grid value of `name`.
pub fn profile_loglik(bound: &BoundModel, name: &str, grid: &[f64], options: &FitOptions) -> Result<Vec<ProfilePoint>> {
    let layout = bound.layout();
    let idx = layout.index_of(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
    if layout.slots()[idx].fixed.is_some() {
        return Err(Error::Model(format!("parameter `{name}` is fixed and cannot be profiled")));
    }
    let mut warm: Option<BTreeMap<String, f64>> = None;
    let mut curve = Vec::with_capacity(grid.len());
    for &value in grid {
        let restricted = bound.with_fixed(name, value)?;
        let init = match &warm {
            Some(map) => Some(restricted.layout().natural_from_map(map)?),
            None => None,
        };
        let result = fit(&restricted, init.as_deref(), options)?;
        let mut map = result.estimates();
        map.remove(name);
        warm = Some(map);
        curve.push(ProfilePoint { value, loglik: result.loglik });
    }
    Ok(curve)
}
