//! Exponential-family kernels and their conjugate random-effect distributions.
//!
//! A response density is written `exp{(yθ − b(θ))/φ + c(y, φ)}` and the
//! random effect on the canonical parameter θ has density
//! `g(χ, ν) exp{χθ − ν b₁(θ)}`, where `b₁` is the cumulant of a single
//! Bernoulli trial for the binomial family and `b` itself otherwise. A
//! binomial observation with `n` trials therefore adds `n/φ` to ν.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{lgamma, ln_beta, ln_binomial, ln_factorial, ln_gamma_ratio, log1p_exp, logistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Binomial,
    Gamma,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Gaussian, Family::Poisson, Family::Binomial, Family::Gamma];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
            Family::Gamma => "gamma",
        }
    }

    /// Whether a non-trivial solution set exists, i.e. unit-level covariates
    /// can enter without losing the closed form.
    pub fn supports_unit_covariates(&self) -> bool {
        !matches!(self, Family::Binomial)
    }

    /// Cumulant of a unit-weight observation, the `b₁` of the conjugate density.
    pub fn unit_cumulant(&self, theta: f64) -> Result<f64> {
        match self {
            Family::Gaussian => Ok(0.5 * theta * theta),
            Family::Poisson => Ok(theta.exp()),
            Family::Binomial => Ok(log1p_exp(theta)),
            Family::Gamma => {
                if theta < 0.0 {
                    Ok(-(-theta).ln())
                } else {
                    Err(Error::CanonicalDomain { family: *self, value: theta })
                }
            }
        }
    }

    /// Mean of a unit-weight observation, `b₁'(θ)`.
    pub fn mean_of(&self, theta: f64) -> Result<f64> {
        match self {
            Family::Gaussian => Ok(theta),
            Family::Poisson => Ok(theta.exp()),
            Family::Binomial => Ok(logistic(theta)),
            Family::Gamma => {
                if theta < 0.0 {
                    Ok(-1.0 / theta)
                } else {
                    Err(Error::CanonicalDomain { family: *self, value: theta })
                }
            }
        }
    }

    /// Canonical parameter θ(μ) of a unit-weight observation.
    pub fn theta_of(&self, mu: f64) -> Result<f64> {
        let in_domain = match self {
            Family::Gaussian => mu.is_finite(),
            Family::Poisson | Family::Gamma => mu > 0.0 && mu.is_finite(),
            Family::Binomial => mu > 0.0 && mu < 1.0,
        };
        if !in_domain {
            return Err(Error::MeanDomain { family: *self, value: mu });
        }
        Ok(match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Binomial => (mu / (1.0 - mu)).ln(),
            Family::Gamma => -1.0 / mu,
        })
    }

    pub(crate) fn in_canonical_domain(&self, theta: f64) -> bool {
        theta.is_finite() && (!matches!(self, Family::Gamma) || theta < 0.0)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "binomial" => Ok(Family::Binomial),
            "gamma" => Ok(Family::Gamma),
            other => Err(Error::Model(format!("unknown family `{other}`"))),
        }
    }
}

/// One exponential family together with its fixed structural constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyKernel {
    /// Known variance σ², which is also the dispersion.
    Gaussian { variance: f64 },
    Poisson,
    /// Known number of trials per observation.
    Binomial { trials: u32 },
    /// Known shape A; the dispersion is 1/A.
    Gamma { shape: f64 },
}

impl FamilyKernel {
    pub fn gaussian(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Kernel {
                family: Family::Gaussian,
                reason: format!("variance must be positive, got {variance}"),
            });
        }
        Ok(FamilyKernel::Gaussian { variance })
    }

    pub fn poisson() -> Self {
        FamilyKernel::Poisson
    }

    pub fn binomial(trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(Error::Kernel {
                family: Family::Binomial,
                reason: "number of trials must be at least 1".into(),
            });
        }
        Ok(FamilyKernel::Binomial { trials })
    }

    pub fn gamma(shape: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::Kernel {
                family: Family::Gamma,
                reason: format!("shape must be positive, got {shape}"),
            });
        }
        Ok(FamilyKernel::Gamma { shape })
    }

    pub fn family(&self) -> Family {
        match self {
            FamilyKernel::Gaussian { .. } => Family::Gaussian,
            FamilyKernel::Poisson => Family::Poisson,
            FamilyKernel::Binomial { .. } => Family::Binomial,
            FamilyKernel::Gamma { .. } => Family::Gamma,
        }
    }

    pub fn dispersion(&self) -> f64 {
        match *self {
            FamilyKernel::Gaussian { variance } => variance,
            FamilyKernel::Poisson | FamilyKernel::Binomial { .. } => 1.0,
            FamilyKernel::Gamma { shape } => 1.0 / shape,
        }
    }

    /// The same kernel with a different trial count; other families are returned unchanged.
    pub fn with_trials(&self, trials: u32) -> Result<Self> {
        match self {
            FamilyKernel::Binomial { .. } => FamilyKernel::binomial(trials),
            other => Ok(*other),
        }
    }

    /// Multiple of `b₁` making up this kernel's cumulant.
    pub fn weight(&self) -> f64 {
        match *self {
            FamilyKernel::Binomial { trials } => f64::from(trials),
            _ => 1.0,
        }
    }

    pub fn canonical_theta(&self, mu: f64) -> Result<f64> {
        self.family().theta_of(mu)
    }

    /// Inverse of [`canonical_theta`](Self::canonical_theta): the mean (success
    /// probability for the binomial family) at canonical parameter θ.
    pub fn mean(&self, theta: f64) -> Result<f64> {
        self.family().mean_of(theta)
    }

    pub fn cumulant(&self, theta: f64) -> Result<f64> {
        Ok(self.weight() * self.family().unit_cumulant(theta)?)
    }

    pub fn check_support(&self, y: f64) -> Result<()> {
        let ok = match *self {
            FamilyKernel::Gaussian { .. } => y.is_finite(),
            FamilyKernel::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            FamilyKernel::Binomial { trials } => {
                y >= 0.0 && y.fract() == 0.0 && y <= f64::from(trials)
            }
            FamilyKernel::Gamma { .. } => y > 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Support {
                family: self.family(),
                value: y,
                trials: match *self {
                    FamilyKernel::Binomial { trials } => Some(trials),
                    _ => None,
                },
            })
        }
    }

    /// The carrier term `c(y, φ)`, with every normalizing constant included.
    pub fn carrier(&self, y: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok(match *self {
            FamilyKernel::Gaussian { variance } => -0.5 * ((2.0 * PI * variance).ln() + y * y / variance),
            FamilyKernel::Poisson => -ln_factorial(y),
            FamilyKernel::Binomial { trials } => ln_binomial(f64::from(trials), y),
            FamilyKernel::Gamma { shape } => shape * (shape * y).ln() - y.ln() - lgamma(shape),
        })
    }

    /// `log f(y | θ)`.
    pub fn log_density(&self, y: f64, theta: f64) -> Result<f64> {
        let c = self.carrier(y)?;
        Ok((y * theta - self.cumulant(theta)?) / self.dispersion() + c)
    }
}

/// Conjugate distribution of the canonical random effect, stored in natural
/// form `(χ, ν)`.
///
/// Per-family views:
///
/// | family   | view            | relation                           |
/// |----------|-----------------|------------------------------------|
/// | gaussian | mean λ, var κ²  | λ = χ/ν, κ² = 1/ν                  |
/// | poisson  | shape A, scale B| A = χ, B = 1/ν (μ₀ ~ Gamma(A, B))  |
/// | binomial | shapes A, B     | A = χ, B = ν − χ (μ₀ ~ Beta(A, B)) |
/// | gamma    | shape C, scale D| C = ν + 1, D = χ                   |
///
/// For the Gamma family μ₀ = −1/θ₀ is inverse-gamma with density
/// ∝ μ₀^{−(C+1)} e^{−D/μ₀}, so E(μ₀) = D/(C − 1) when C > 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugatePrior {
    family: Family,
    chi: f64,
    nu: f64,
}

fn integrable(family: Family, chi: f64, nu: f64) -> bool {
    if !(chi.is_finite() && nu.is_finite()) {
        return false;
    }
    match family {
        Family::Gaussian => nu > 0.0,
        Family::Poisson => chi > 0.0 && nu > 0.0,
        Family::Binomial => chi > 0.0 && nu - chi > 0.0,
        Family::Gamma => chi > 0.0 && nu > -1.0,
    }
}

impl ConjugatePrior {
    pub fn new(family: Family, chi: f64, nu: f64) -> Result<Self> {
        if integrable(family, chi, nu) {
            Ok(ConjugatePrior { family, chi, nu })
        } else {
            Err(Error::PriorParameter { family, chi, nu })
        }
    }

    /// μ₀ ~ N(mean, variance).
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        Self::new(Family::Gaussian, mean / variance, 1.0 / variance)
    }

    /// μ₀ ~ Gamma(shape, scale).
    pub fn poisson(shape: f64, scale: f64) -> Result<Self> {
        Self::new(Family::Poisson, shape, 1.0 / scale)
    }

    /// μ₀ ~ Beta(a, b).
    pub fn binomial(a: f64, b: f64) -> Result<Self> {
        Self::new(Family::Binomial, a, a + b)
    }

    /// μ₀ ~ Inverse-Gamma(shape c, scale d).
    pub fn gamma(c: f64, d: f64) -> Result<Self> {
        Self::new(Family::Gamma, d, c - 1.0)
    }

    /// Builds the prior from its per-family view (see the type docs).
    pub fn from_family_params(family: Family, first: f64, second: f64) -> Result<Self> {
        match family {
            Family::Gaussian => Self::gaussian(first, second),
            Family::Poisson => Self::poisson(first, second),
            Family::Binomial => Self::binomial(first, second),
            Family::Gamma => Self::gamma(first, second),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// The per-family view (see the type docs).
    pub fn family_params(&self) -> (f64, f64) {
        let (chi, nu) = (self.chi, self.nu);
        match self.family {
            Family::Gaussian => (chi / nu, 1.0 / nu),
            Family::Poisson => (chi, 1.0 / nu),
            Family::Binomial => (chi, nu - chi),
            Family::Gamma => (nu + 1.0, chi),
        }
    }

    /// `log g(χ, ν)`.
    pub fn log_normalizer(&self) -> f64 {
        let (chi, nu) = (self.chi, self.nu);
        match self.family {
            Family::Gaussian => 0.5 * (nu / (2.0 * PI)).ln() - chi * chi / (2.0 * nu),
            Family::Poisson => chi * nu.ln() - lgamma(chi),
            Family::Binomial => -ln_beta(chi, nu - chi),
            Family::Gamma => (nu + 1.0) * chi.ln() - lgamma(nu + 1.0),
        }
    }

    /// Log density of the random effect at canonical value θ.
    pub fn log_density(&self, theta: f64) -> Result<f64> {
        Ok(self.chi * theta - self.nu * self.family.unit_cumulant(theta)? + self.log_normalizer())
    }

    /// Shifts the natural parameters; fails when the result is not integrable.
    pub fn shifted(&self, d_chi: f64, d_nu: f64) -> Result<Self> {
        let (chi, nu) = (self.chi + d_chi, self.nu + d_nu);
        if integrable(self.family, chi, nu) {
            Ok(ConjugatePrior { family: self.family, chi, nu })
        } else {
            Err(Error::DegeneratePosterior { family: self.family, chi, nu })
        }
    }

    /// Conjugate update with observations `ys` drawn from `kernel`.
    pub fn posterior_update(&self, kernel: &FamilyKernel, ys: &[f64]) -> Result<Self> {
        if kernel.family() != self.family {
            return Err(Error::Model(format!(
                "{} prior cannot be updated with a {} kernel",
                self.family,
                kernel.family()
            )));
        }
        let phi = kernel.dispersion();
        let mut sum_y = 0.0;
        for &y in ys {
            kernel.check_support(y)?;
            sum_y += y;
        }
        let n = ys.len() as f64;
        self.shifted(sum_y / phi, n * kernel.weight() / phi)
    }

    /// `log g(χ, ν) − log g(χ + d_chi, ν + d_nu)`, evaluated from the
    /// increments so that large χ, ν do not cancel catastrophically.
    pub fn log_normalizer_ratio(&self, d_chi: f64, d_nu: f64) -> Result<f64> {
        let post = self.shifted(d_chi, d_nu)?;
        let (chi, nu) = (self.chi, self.nu);
        let (chi_post, nu_post) = (post.chi, post.nu);
        Ok(match self.family {
            Family::Gaussian => {
                -0.5 * (d_nu / nu).ln_1p() - chi * chi / (2.0 * nu) + chi_post * chi_post / (2.0 * nu_post)
            }
            Family::Poisson => -chi * (d_nu / nu).ln_1p() - d_chi * nu_post.ln() + ln_gamma_ratio(chi, d_chi),
            Family::Binomial => {
                ln_gamma_ratio(chi, d_chi) + ln_gamma_ratio(nu - chi, d_nu - d_chi) - ln_gamma_ratio(nu, d_nu)
            }
            Family::Gamma => {
                -(nu + 1.0) * (d_chi / chi).ln_1p() - d_nu * chi_post.ln() + ln_gamma_ratio(nu + 1.0, d_nu)
            }
        })
    }
}
