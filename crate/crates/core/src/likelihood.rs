//! Closed-form marginal log-likelihoods.
//!
//! A group contributes
//!
//! ```text
//! Σ c(y, φ) + log g(χ, ν) + Σ (r y − u)/φ − log g(χ + Σ(y p − s)/φ, ν + Σ(t − y q)/φ)
//! ```
//!
//! which for the baseline solution set is the group-level form
//! `Σ c + log g(χ, ν) − log g(χ + Σy/φ, ν + Σw/φ)` with `w` the binomial trials
//! (1 for other families).

use std::f64::consts::PI;

use crate::conjugacy::{solution_set, CovariateTransform, SolutionSet, SolutionValues};
use crate::error::{Error, Result};
use crate::families::{ConjugatePrior, Family, FamilyKernel};
use crate::model::BoundModel;
use crate::special::{lgamma, ln_beta};

/// Responses and row-major covariates of one group.
#[derive(Debug, Clone, Copy)]
pub struct GroupView<'a> {
    pub y: &'a [f64],
    pub trials: Option<&'a [u32]>,
    pub x: &'a [f64],
    pub ncols: usize,
}

impl<'a> GroupView<'a> {
    pub fn responses(y: &'a [f64]) -> Self {
        GroupView { y, trials: None, x: &[], ncols: 0 }
    }

    pub fn with_covariates(mut self, x: &'a [f64], ncols: usize) -> Self {
        self.x = x;
        self.ncols = ncols;
        self
    }

    pub fn with_trials(mut self, trials: &'a [u32]) -> Self {
        self.trials = Some(trials);
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, j: usize) -> &'a [f64] {
        if self.ncols == 0 {
            &[]
        } else {
            &self.x[j * self.ncols..(j + 1) * self.ncols]
        }
    }

    pub fn kernel_for(&self, base: &FamilyKernel, j: usize) -> Result<FamilyKernel> {
        match self.trials {
            Some(t) => base.with_trials(t[j]),
            None => Ok(*base),
        }
    }
}

/// Sums over `j` of the solution-set terms entering the posterior parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GenericReductions {
    pub sum_yp: f64,
    pub sum_s: f64,
    pub sum_t: f64,
    pub sum_yq: f64,
    pub sum_ry_minus_u: f64,
}

/// Family-specific sums matching the explicit per-family log-likelihoods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyReductions {
    Gaussian {
        sum_z1_sq: f64,
        sum_z1_y: f64,
        sum_z1_z2: f64,
        sum_z2_y: f64,
        sum_z2_sq: f64,
        sum_y_sq: f64,
    },
    Poisson {
        sum_exp_zeta: f64,
        sum_zeta_y: f64,
    },
    Binomial,
    Gamma {
        sum_zeta_y: f64,
        sum_log_zeta: f64,
        sum_log_y: f64,
    },
}

/// Sufficient statistics of one group under a kernel and optional transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub n: usize,
    pub sum_y: f64,
    /// Σ w, the total trials for the binomial family and `n` otherwise.
    pub sum_weight: f64,
    pub sum_carrier: f64,
    pub generic: GenericReductions,
    pub specific: FamilyReductions,
}

/// Reduces a group to its sufficient statistics in one pass.
pub fn group_stats(kernel: &FamilyKernel, transform: Option<&CovariateTransform>, group: &GroupView<'_>) -> Result<GroupStats> {
    let family = kernel.family();
    if let Some(t) = transform {
        if t.family() != family {
            return Err(Error::Model(format!("{} transform used with a {family} kernel", t.family())));
        }
        if t.predictor().dim() != group.ncols {
            return Err(Error::Model(format!(
                "transform expects {} covariates, group rows have {}",
                t.predictor().dim(),
                group.ncols
            )));
        }
    }
    let sol: Option<SolutionSet> = transform.map(solution_set).transpose()?;

    let mut stats = GroupStats {
        n: group.len(),
        sum_y: 0.0,
        sum_weight: 0.0,
        sum_carrier: 0.0,
        generic: GenericReductions::default(),
        specific: match family {
            Family::Gaussian => FamilyReductions::Gaussian {
                sum_z1_sq: 0.0,
                sum_z1_y: 0.0,
                sum_z1_z2: 0.0,
                sum_z2_y: 0.0,
                sum_z2_sq: 0.0,
                sum_y_sq: 0.0,
            },
            Family::Poisson => FamilyReductions::Poisson { sum_exp_zeta: 0.0, sum_zeta_y: 0.0 },
            Family::Binomial => FamilyReductions::Binomial,
            Family::Gamma => FamilyReductions::Gamma { sum_zeta_y: 0.0, sum_log_zeta: 0.0, sum_log_y: 0.0 },
        },
    };

    for (j, &y) in group.y.iter().enumerate() {
        let k = group.kernel_for(kernel, j)?;
        stats.sum_carrier += k.carrier(y)?;
        stats.sum_y += y;
        stats.sum_weight += k.weight();

        let x = group.row(j);
        let v = sol.as_ref().map_or(SolutionValues::BASELINE, |s| s.eval(x));
        let g = &mut stats.generic;
        g.sum_yp += y * v.p;
        g.sum_s += v.s;
        g.sum_t += v.t * k.weight();
        g.sum_yq += y * v.q;
        g.sum_ry_minus_u += v.r * y - v.u;

        let eta = transform.map_or(0.0, |t| t.eta(x));
        match &mut stats.specific {
            FamilyReductions::Gaussian { sum_z1_sq, sum_z1_y, sum_z1_z2, sum_z2_y, sum_z2_sq, sum_y_sq } => {
                let z2 = eta;
                *sum_z1_sq += 1.0;
                *sum_z1_y += y;
                *sum_z1_z2 += z2;
                *sum_z2_y += z2 * y;
                *sum_z2_sq += z2 * z2;
                *sum_y_sq += y * y;
            }
            FamilyReductions::Poisson { sum_exp_zeta, sum_zeta_y } => {
                *sum_exp_zeta += eta.exp();
                *sum_zeta_y += eta * y;
            }
            FamilyReductions::Binomial => {}
            FamilyReductions::Gamma { sum_zeta_y, sum_log_zeta, sum_log_y } => {
                *sum_zeta_y += eta.exp() * y;
                *sum_log_zeta += eta;
                *sum_log_y += y.ln();
            }
        }
    }
    for value in [
        stats.sum_y,
        stats.sum_carrier,
        stats.generic.sum_yp,
        stats.generic.sum_t,
        stats.generic.sum_ry_minus_u,
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { name: "group reduction".into(), value });
        }
    }
    Ok(stats)
}

fn check_family(kernel: &FamilyKernel, prior: &ConjugatePrior) -> Result<()> {
    if kernel.family() != prior.family() {
        return Err(Error::Model(format!("{} prior paired with a {} kernel", prior.family(), kernel.family())));
    }
    Ok(())
}

/// Group-level marginal log-likelihood of one group, constants included.
///
/// Uses only `n`, `Σy`, `Σw` and `Σc`; any transform in `stats` is ignored.
pub fn group_loglik(kernel: &FamilyKernel, prior: &ConjugatePrior, stats: &GroupStats) -> Result<f64> {
    check_family(kernel, prior)?;
    if stats.n == 0 {
        return Ok(0.0);
    }
    let phi = kernel.dispersion();
    Ok(stats.sum_carrier + prior.log_normalizer_ratio(stats.sum_y / phi, stats.sum_weight / phi)?)
}

/// Unit-level marginal log-likelihood of one group, constants included.
pub fn unit_loglik(kernel: &FamilyKernel, prior: &ConjugatePrior, stats: &GroupStats) -> Result<f64> {
    check_family(kernel, prior)?;
    if !kernel.family().supports_unit_covariates() {
        return Err(Error::BinomialUnitLevel);
    }
    if stats.n == 0 {
        return Ok(0.0);
    }
    let phi = kernel.dispersion();
    let g = &stats.generic;
    let d_chi = (g.sum_yp - g.sum_s) / phi;
    let d_nu = (g.sum_t - g.sum_yq) / phi;
    Ok(stats.sum_carrier + g.sum_ry_minus_u / phi + prior.log_normalizer_ratio(d_chi, d_nu)?)
}

/// Explicit per-family log-likelihood of one group from the family-specific
/// reductions, written out in the familiar parameterizations. Used to
/// cross-check the generic normalizer-ratio route.
pub fn explicit_loglik(kernel: &FamilyKernel, prior: &ConjugatePrior, stats: &GroupStats) -> Result<f64> {
    check_family(kernel, prior)?;
    let n = stats.n as f64;
    let (first, second) = prior.family_params();
    Ok(match (*kernel, stats.specific) {
        (
            FamilyKernel::Gaussian { variance: s2 },
            FamilyReductions::Gaussian { sum_z1_sq, sum_z1_y, sum_z1_z2, sum_z2_y, sum_z2_sq, sum_y_sq },
        ) => {
            // y ~ N(ζ₂ + λζ₁, σ²I + κ²ζ₁ζ₁ᵀ)
            let (lambda, k2) = (first, second);
            let denom = s2 + k2 * sum_z1_sq;
            let log_det = (n - 1.0) * s2.ln() + denom.ln();
            let rr = sum_y_sq - 2.0 * sum_z2_y + sum_z2_sq - 2.0 * lambda * (sum_z1_y - sum_z1_z2)
                + lambda * lambda * sum_z1_sq;
            let zr = sum_z1_y - sum_z1_z2 - lambda * sum_z1_sq;
            let quad = (rr - k2 * zr * zr / denom) / s2;
            -0.5 * (n * (2.0 * PI).ln() + log_det + quad)
        }
        (FamilyKernel::Poisson, FamilyReductions::Poisson { sum_exp_zeta, sum_zeta_y }) => {
            let (a, b) = (first, second);
            lgamma(a + stats.sum_y) - (a + stats.sum_y) * (1.0 / b + sum_exp_zeta).ln() - lgamma(a) - a * b.ln()
                + sum_zeta_y
                + stats.sum_carrier
        }
        (FamilyKernel::Binomial { .. }, FamilyReductions::Binomial) => {
            let (a, b) = (first, second);
            ln_beta(a + stats.sum_y, b + stats.sum_weight - stats.sum_y) - ln_beta(a, b) + stats.sum_carrier
        }
        (FamilyKernel::Gamma { shape: a }, FamilyReductions::Gamma { sum_zeta_y, sum_log_zeta, sum_log_y }) => {
            let (c, d) = (first, second);
            lgamma(a * n + c) - n * lgamma(a) - lgamma(c) + a * n * a.ln() + (a - 1.0) * sum_log_y
                - (a * n + c) * (d + a * sum_zeta_y).ln()
                + c * d.ln()
                + a * sum_log_zeta
        }
        _ => return Err(Error::Model("group statistics were computed for a different family".into())),
    })
}

/// Closed-form contribution of every group, in group order.
pub fn group_contributions(bound: &BoundModel, natural: &[f64]) -> Result<Vec<f64>> {
    let kernel = bound.kernel(natural)?;
    let transform = bound.transform(natural)?;
    let ncols = bound.n_unit_covariates();
    bound
        .groups()
        .iter()
        .enumerate()
        .map(|(i, group)| {
            if group.y.is_empty() {
                log::warn!("group `{}` has no units and contributes nothing", group.id);
                return Ok(0.0);
            }
            let prior = bound.group_prior(natural, i)?;
            let stats = group_stats(&kernel, transform.as_ref(), &group.view(ncols))?;
            match transform {
                Some(_) => unit_loglik(&kernel, &prior, &stats),
                None => group_loglik(&kernel, &prior, &stats),
            }
        })
        .collect()
}

/// Sum of per-group contributions in group order.
pub fn total_loglik(bound: &BoundModel, natural: &[f64]) -> Result<f64> {
    Ok(group_contributions(bound, natural)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn stats(kernel: &FamilyKernel, t: Option<&CovariateTransform>, y: &[f64], x: &[f64]) -> GroupStats {
        let ncols = t.map_or(0, |t| t.predictor().dim());
        group_stats(kernel, t, &GroupView::responses(y).with_covariates(x, ncols)).unwrap()
    }

    #[test]
    fn poisson_group_stats_without_transform() {
        let s = stats(&FamilyKernel::poisson(), None, &[1.0, 2.0, 3.0], &[]);
        assert_eq!(s.n, 3);
        assert_eq!(s.sum_y, 6.0);
        assert_abs_diff_eq!(s.sum_carrier, -(2f64.ln() + 6f64.ln()), epsilon = 1e-14);
    }

    #[test]
    fn null_predictors_reduce_to_baseline() {
        let t = CovariateTransform::linear(Family::Poisson, vec![0.0]).unwrap();
        let s = stats(&FamilyKernel::poisson(), Some(&t), &[1.0, 4.0], &[0.3, -2.0]);
        assert_eq!(s.specific, FamilyReductions::Poisson { sum_exp_zeta: 2.0, sum_zeta_y: 0.0 });

        let k = FamilyKernel::gamma(2.0).unwrap();
        let t = CovariateTransform::linear(Family::Gamma, vec![0.0]).unwrap();
        let s = stats(&k, Some(&t), &[1.5, 2.5], &[0.3, -2.0]);
        match s.specific {
            FamilyReductions::Gamma { sum_zeta_y, sum_log_zeta, .. } => {
                assert_eq!(sum_zeta_y, 4.0);
                assert_eq!(sum_log_zeta, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn group_loglik_examples() {
        let poisson = FamilyKernel::poisson();
        let s = stats(&poisson, None, &[0.0], &[]);
        let prior = ConjugatePrior::poisson(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(group_loglik(&poisson, &prior, &s).unwrap(), -(2f64.ln()), epsilon = 1e-14);

        // negative binomial pmf: Γ(3)/(Γ(2) 1!) (2/3)^2 (1/3)^1 = 8/27
        let s = stats(&poisson, None, &[1.0], &[]);
        let prior = ConjugatePrior::poisson(2.0, 0.5).unwrap();
        assert_abs_diff_eq!(group_loglik(&poisson, &prior, &s).unwrap(), (8.0f64 / 27.0).ln(), epsilon = 1e-14);

        let gauss = FamilyKernel::gaussian(1.0).unwrap();
        let s = stats(&gauss, None, &[0.0], &[]);
        let prior = ConjugatePrior::gaussian(0.0, 1.0).unwrap();
        assert_abs_diff_eq!(group_loglik(&gauss, &prior, &s).unwrap(), -0.5 * (4.0 * PI).ln(), epsilon = 1e-14);

        let binom = FamilyKernel::binomial(1).unwrap();
        let s = stats(&binom, None, &[1.0], &[]);
        let prior = ConjugatePrior::binomial(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(group_loglik(&binom, &prior, &s).unwrap(), -(2f64.ln()), epsilon = 1e-14);

        let gamma = FamilyKernel::gamma(1.0).unwrap();
        let s = stats(&gamma, None, &[1.0], &[]);
        let prior = ConjugatePrior::gamma(2.0, 1.0).unwrap();
        assert_abs_diff_eq!(group_loglik(&gamma, &prior, &s).unwrap(), -2.0 * 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn unit_loglik_examples() {
        let poisson = FamilyKernel::poisson();
        let t = CovariateTransform::linear(Family::Poisson, vec![2f64.ln()]).unwrap();
        let s = stats(&poisson, Some(&t), &[0.0], &[1.0]);
        let prior = ConjugatePrior::poisson(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(unit_loglik(&poisson, &prior, &s).unwrap(), -(3f64.ln()), epsilon = 1e-14);

        let gamma = FamilyKernel::gamma(1.0).unwrap();
        let t = CovariateTransform::linear(Family::Gamma, vec![2f64.ln()]).unwrap();
        let s = stats(&gamma, Some(&t), &[1.0], &[1.0]);
        let prior = ConjugatePrior::gamma(2.0, 1.0).unwrap();
        assert_abs_diff_eq!(
            unit_loglik(&gamma, &prior, &s).unwrap(),
            4f64.ln() - 3.0 * 3f64.ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn null_transform_reduces_to_group_level() {
        let poisson = FamilyKernel::poisson();
        let prior = ConjugatePrior::poisson(1.7, 0.8).unwrap();
        let y = [0.0, 3.0, 1.0, 7.0];
        let x = [0.1, -0.4, 1.2, 2.0];
        let t = CovariateTransform::linear(Family::Poisson, vec![0.0]).unwrap();
        let unit = unit_loglik(&poisson, &prior, &stats(&poisson, Some(&t), &y, &x)).unwrap();
        let group = group_loglik(&poisson, &prior, &stats(&poisson, None, &y, &[])).unwrap();
        assert!((unit - group).abs() < 1e-14);
    }

    #[test]
    fn binomial_unit_loglik_is_refused() {
        let binom = FamilyKernel::binomial(3).unwrap();
        let prior = ConjugatePrior::binomial(1.0, 2.0).unwrap();
        let s = stats(&binom, None, &[1.0, 2.0], &[]);
        assert!(matches!(unit_loglik(&binom, &prior, &s), Err(Error::BinomialUnitLevel)));
    }

    #[test]
    fn explicit_forms_agree_with_generic_route() {
        let y_counts = [2.0, 0.0, 5.0, 1.0];
        let y_pos = [0.4, 1.7, 2.2, 0.9];
        let x = [0.3, -1.1, 0.8, 0.0];
        let cases: Vec<(FamilyKernel, ConjugatePrior, Option<CovariateTransform>, &[f64])> = vec![
            (FamilyKernel::gaussian(0.8).unwrap(), ConjugatePrior::gaussian(0.4, 1.3).unwrap(), None, &y_pos),
            (
                FamilyKernel::gaussian(0.8).unwrap(),
                ConjugatePrior::gaussian(-0.2, 0.6).unwrap(),
                Some(CovariateTransform::linear(Family::Gaussian, vec![0.7]).unwrap()),
                &y_pos,
            ),
            (FamilyKernel::poisson(), ConjugatePrior::poisson(2.2, 0.9).unwrap(), None, &y_counts),
            (
                FamilyKernel::poisson(),
                ConjugatePrior::poisson(2.2, 0.9).unwrap(),
                Some(CovariateTransform::linear(Family::Poisson, vec![-0.6]).unwrap()),
                &y_counts,
            ),
            (FamilyKernel::binomial(6).unwrap(), ConjugatePrior::binomial(1.4, 3.1).unwrap(), None, &y_counts),
            (FamilyKernel::gamma(1.8).unwrap(), ConjugatePrior::gamma(3.5, 1.2).unwrap(), None, &y_pos),
            (
                FamilyKernel::gamma(1.8).unwrap(),
                ConjugatePrior::gamma(0.7, 1.2).unwrap(),
                Some(CovariateTransform::linear(Family::Gamma, vec![0.45]).unwrap()),
                &y_pos,
            ),
        ];
        for (kernel, prior, t, y) in cases {
            let s = stats(&kernel, t.as_ref(), y, &x);
            let generic = match t {
                Some(_) => unit_loglik(&kernel, &prior, &s).unwrap(),
                None => group_loglik(&kernel, &prior, &s).unwrap(),
            };
            let explicit = explicit_loglik(&kernel, &prior, &s).unwrap();
            assert!(
                (generic - explicit).abs() < 1e-11 * generic.abs().max(1.0),
                "{kernel:?}: {generic} vs {explicit}"
            );
        }
    }

    #[test]
    fn order_within_group_does_not_matter() {
        let k = FamilyKernel::gamma(2.0).unwrap();
        let t = CovariateTransform::linear(Family::Gamma, vec![0.3]).unwrap();
        let prior = ConjugatePrior::gamma(2.5, 1.5).unwrap();
        let a = unit_loglik(&k, &prior, &stats(&k, Some(&t), &[1.0, 2.0, 0.5], &[0.1, 0.2, 0.3])).unwrap();
        let b = unit_loglik(&k, &prior, &stats(&k, Some(&t), &[0.5, 1.0, 2.0], &[0.3, 0.1, 0.2])).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn poisson_marginal_pmf_sums_to_one() {
        let k = FamilyKernel::poisson();
        for (a, b) in [(0.7, 1.5), (2.0, 0.5), (4.0, 1.0), (8.0, 0.3)] {
            let prior = ConjugatePrior::poisson(a, b).unwrap();
            let mut mass = 0.0;
            let mut previous = 0.0;
            for y in 0..=200 {
                let p = group_loglik(&k, &prior, &stats(&k, None, &[f64::from(y)], &[])).unwrap().exp();
                mass += p;
                if y == 20 {
                    previous = mass;
                }
            }
            assert!(previous < mass && mass < 1.0 + 1e-12, "A={a} B={b}: {mass}");
            assert!(1.0 - mass < 1e-8, "A={a} B={b}: deficit {}", 1.0 - mass);
        }
    }

    #[test]
    fn empty_group_contributes_nothing() {
        let k = FamilyKernel::gaussian(1.3).unwrap();
        let prior = ConjugatePrior::gaussian(0.4, 2.0).unwrap();
        assert_eq!(group_loglik(&k, &prior, &stats(&k, None, &[], &[])).unwrap(), 0.0);
    }
}
