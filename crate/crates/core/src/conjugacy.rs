//! Affine conjugacy conditions for unit-level covariates.
//!
//! A unit with covariates `x` has canonical parameter
//! `θ(x) = p(x)θ₀ + q(x)b(θ₀) + r(x)` and cumulant
//! `b(θ(x)) = s(x)θ₀ + t(x)b(θ₀) + u(x)`, which keeps the integrand over the
//! group effect θ₀ in the conjugate family. The baseline `x₀ = 0` gives
//! `(p, q, r, s, t, u) = (1, 0, 0, 0, 1, 0)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::families::{Family, FamilyKernel};

type PredictorFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type SolutionFn = dyn Fn(&[f64]) -> SolutionValues + Send + Sync;

/// The scalar function η(x) behind a transform. Linear predictors carry no
/// intercept, so η(0) = 0 always.
#[derive(Clone)]
pub enum Predictor {
    Linear(Vec<f64>),
    Custom { dim: usize, f: Arc<PredictorFn> },
}

impl Predictor {
    pub fn custom(dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Predictor::Custom { dim, f: Arc::new(f) }
    }

    pub fn dim(&self) -> usize {
        match self {
            Predictor::Linear(beta) => beta.len(),
            Predictor::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Predictor::Linear(beta) => beta.iter().zip(x).map(|(b, x)| b * x).sum(),
            Predictor::Custom { f, .. } => f(x),
        }
    }
}

impl fmt::Debug for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predictor::Linear(beta) => f.debug_tuple("Linear").field(beta).finish(),
            Predictor::Custom { dim, .. } => f.debug_struct("Custom").field("dim", dim).finish_non_exhaustive(),
        }
    }
}

/// How unit covariates modify the group's baseline mean μ₀:
///
/// * gaussian: μ(x) = μ₀ + ζ₂(x), ζ₂ = η (ζ₁ ≡ 1)
/// * poisson: μ(x) = μ₀ e^{ζ(x)}, ζ = η
/// * gamma: μ(x) = μ₀ / ζ(x), ζ = e^{η}
#[derive(Debug, Clone)]
pub struct CovariateTransform {
    family: Family,
    predictor: Predictor,
}

impl CovariateTransform {
    pub fn new(family: Family, predictor: Predictor) -> Result<Self> {
        if !family.supports_unit_covariates() {
            return Err(Error::BinomialUnitLevel);
        }
        if let Predictor::Custom { dim, f } = &predictor {
            let at_baseline = f(&vec![0.0; *dim]);
            if at_baseline != 0.0 {
                return Err(Error::Baseline(format!(
                    "predictor must vanish at x = 0, got {at_baseline}"
                )));
            }
        }
        Ok(CovariateTransform { family, predictor })
    }

    pub fn linear(family: Family, beta: Vec<f64>) -> Result<Self> {
        Self::new(family, Predictor::Linear(beta))
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn eta(&self, x: &[f64]) -> f64 {
        self.predictor.eval(x)
    }

    /// ζ(x) (ζ₂(x) for the Gaussian family).
    pub fn zeta(&self, x: &[f64]) -> f64 {
        let eta = self.eta(x);
        match self.family {
            Family::Gamma => eta.exp(),
            _ => eta,
        }
    }

    /// Unit mean μ(x) given the group's baseline mean μ₀, from the mean map
    /// directly rather than through the solution set.
    pub fn mean_at(&self, mu0: f64, x: &[f64]) -> f64 {
        let zeta = self.zeta(x);
        match self.family {
            Family::Gaussian => mu0 + zeta,
            Family::Poisson => mu0 * zeta.exp(),
            Family::Gamma => mu0 / zeta,
            Family::Binomial => unreachable!("binomial transforms cannot be constructed"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolutionValues {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub t: f64,
    pub u: f64,
}

impl SolutionValues {
    pub const BASELINE: SolutionValues = SolutionValues { p: 1.0, q: 0.0, r: 0.0, s: 0.0, t: 1.0, u: 0.0 };
}

/// The six functions `(p, q, r, s, t, u)` of the covariates.
#[derive(Clone)]
pub enum SolutionSet {
    Transform(CovariateTransform),
    /// An arbitrary candidate, used to probe the identity for families with no
    /// known solution.
    Candidate(Arc<SolutionFn>),
}

impl SolutionSet {
    pub fn candidate(f: impl Fn(&[f64]) -> SolutionValues + Send + Sync + 'static) -> Self {
        SolutionSet::Candidate(Arc::new(f))
    }

    pub fn eval(&self, x: &[f64]) -> SolutionValues {
        match self {
            SolutionSet::Transform(transform) => {
                let zeta = transform.zeta(x);
                match transform.family {
                    Family::Gaussian => SolutionValues { p: 1.0, q: 0.0, r: zeta, s: zeta, t: 1.0, u: 0.5 * zeta * zeta },
                    Family::Poisson => SolutionValues { p: 1.0, q: 0.0, r: zeta, s: 0.0, t: zeta.exp(), u: 0.0 },
                    Family::Gamma => SolutionValues { p: zeta, q: 0.0, r: 0.0, s: 0.0, t: 1.0, u: -zeta.ln() },
                    Family::Binomial => unreachable!("binomial transforms cannot be constructed"),
                }
            }
            SolutionSet::Candidate(f) => f(x),
        }
    }
}

impl fmt::Debug for SolutionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolutionSet::Transform(t) => f.debug_tuple("Transform").field(t).finish(),
            SolutionSet::Candidate(_) => f.write_str("Candidate(..)"),
        }
    }
}

/// The family's solution set bound to `transform`.
pub fn solution_set(transform: &CovariateTransform) -> Result<SolutionSet> {
    if !transform.family.supports_unit_covariates() {
        return Err(Error::BinomialUnitLevel);
    }
    Ok(SolutionSet::Transform(transform.clone()))
}

fn shifted_theta(kernel: &FamilyKernel, values: &SolutionValues, theta0: f64) -> Result<f64> {
    let family = kernel.family();
    if !family.in_canonical_domain(theta0) {
        return Err(Error::CanonicalDomain { family, value: theta0 });
    }
    let b0 = kernel.cumulant(theta0)?;
    let theta = values.p * theta0 + values.q * b0 + values.r;
    if !family.in_canonical_domain(theta) {
        return Err(Error::CanonicalDomain { family, value: theta });
    }
    Ok(theta)
}

/// Residual of `b{pθ₀ + qb(θ₀) + r} = sθ₀ + tb(θ₀) + u` at covariates `x`.
pub fn verify_identity(kernel: &FamilyKernel, sol: &SolutionSet, x: &[f64], theta0: f64) -> Result<f64> {
    let values = sol.eval(x);
    let theta = shifted_theta(kernel, &values, theta0)?;
    let b0 = kernel.cumulant(theta0)?;
    Ok(kernel.cumulant(theta)? - (values.s * theta0 + values.t * b0 + values.u))
}

/// θ(x) = p(x)θ₀ + q(x)b(θ₀) + r(x).
pub fn effective_theta(kernel: &FamilyKernel, transform: &CovariateTransform, theta0: f64, x: &[f64]) -> Result<f64> {
    let sol = solution_set(transform)?;
    shifted_theta(kernel, &sol.eval(x), theta0)
}
