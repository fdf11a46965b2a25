//! Brute-force marginal likelihood by integrating out each group's random effect.
//!
//! This path deliberately avoids the conjugate normalizers and the solution
//! sets: the prior is normalized numerically, unit means come from the
//! transform's mean map, and response densities are written in their usual
//! mean parameterization. Only the canonical maps and `b₁` are shared with the
//! closed-form path.
//!
//! Integration runs over θ₀ (over `log(−θ₀)` for the Gamma family, whose
//! canonical domain is the negative half-line). The integrand is re-centered
//! at its mode and scaled by its curvature, truncated where it falls
//! `TAIL_DROP` nats below the peak, and integrated with adaptive 15-point
//! Gauss–Kronrod panels.

use std::collections::BinaryHeap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::conjugacy::CovariateTransform;
use crate::error::{Error, Result};
use crate::families::{ConjugatePrior, Family, FamilyKernel};
use crate::likelihood::{group_contributions, GroupView};
use crate::model::BoundModel;
use crate::special::{lgamma, ln_binomial, log_sum_exp};

const TAIL_DROP: f64 = 60.0;
const REL_TOL: f64 = 1e-14;
const MAX_PANELS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Gauss–Kronrod nodes in the initial partition (15 per panel).
    pub nodes: usize,
    /// Re-center at the integrand's mode and scale by its curvature.
    pub recenter: bool,
    /// Draws for the Monte Carlo cross-check.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { nodes: 201, recenter: true, mc_samples: 40_000, seed: 0 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 31 {
            return Err(Error::Quadrature(format!("node count must be at least 31, got {}", self.nodes)));
        }
        Ok(())
    }
}

// 15-point Kronrod abscissae and weights, with the embedded 7-point Gauss weights.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// One Gauss–Kronrod panel of `exp(h − offset)`; also reports the largest `h` seen.
fn gk15<F: Fn(f64) -> f64>(h: &F, offset: f64, a: f64, b: f64) -> Result<(Panel, f64)> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    let mut peak = f64::NEG_INFINITY;
    let mut eval = |x: f64| -> Result<f64> {
        let v = h(x);
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::Quadrature(format!("log-integrand is {v} at node {x}")));
        }
        peak = peak.max(v);
        Ok((v - offset).exp())
    };
    for (i, (&x, &w)) in XGK.iter().zip(&WGK).enumerate() {
        let f = if x == 0.0 {
            eval(center)?
        } else {
            eval(center - half * x)? + eval(center + half * x)?
        };
        kronrod += w * f;
        if i % 2 == 1 {
            gauss += WG[i / 2] * f;
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    Ok((Panel { a, b, value, error }, peak))
}

/// Mode and curvature scale of `h` by safeguarded Newton with numerical derivatives.
fn locate_mode<F: Fn(f64) -> f64>(h: &F, start: f64) -> Result<(f64, f64)> {
    let mut v = start;
    let mut hv = h(v);
    if !hv.is_finite() {
        return Err(Error::Quadrature(format!("log-integrand is {hv} at the starting point {start}")));
    }
    let mut curvature = -1.0;
    for _ in 0..50 {
        let d = 1e-4 * v.abs().max(1.0);
        let (hp, hm) = (h(v + d), h(v - d));
        let grad = (hp - hm) / (2.0 * d);
        curvature = (hp - 2.0 * hv + hm) / (d * d);
        let mut step = if curvature < 0.0 { -grad / curvature } else { grad.signum() };
        step = step.clamp(-2.0, 2.0);
        if step.abs() <= 1e-12 * v.abs().max(1.0) || !step.is_finite() {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial = h(v + step);
            if trial.is_finite() && trial >= hv {
                v += step;
                hv = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let scale = if curvature < 0.0 && curvature.is_finite() { 1.0 / (-curvature).sqrt() } else { 1.0 };
    Ok((v, scale))
}

/// Walks outward from `center` until `h` falls `TAIL_DROP` below the running maximum.
fn tail_bound<F: Fn(f64) -> f64>(h: &F, center: f64, scale: f64, direction: f64, peak: &mut f64) -> f64 {
    let mut step = 0.25 * scale;
    let mut x = center;
    for i in 0..400 {
        x += direction * step;
        let v = h(x);
        if v.is_finite() {
            *peak = peak.max(v);
        }
        if !(v >= *peak - TAIL_DROP) {
            return x;
        }
        if i >= 32 {
            step *= 1.5;
        }
    }
    x
}

/// `log ∫ exp(h(v)) dv` over the whole line.
pub fn log_integrate<F: Fn(f64) -> f64>(h: F, start: f64, config: &QuadratureConfig) -> Result<f64> {
    config.validate()?;
    let (center, scale) = if config.recenter { locate_mode(&h, start)? } else { (start, 1.0) };
    let mut peak = h(center);
    if peak.is_nan() {
        return Err(Error::Quadrature(format!("log-integrand is NaN at {center}")));
    }
    let lo = tail_bound(&h, center, scale, -1.0, &mut peak);
    let hi = tail_bound(&h, center, scale, 1.0, &mut peak);
    if !peak.is_finite() {
        return Err(Error::Quadrature("log-integrand is nowhere finite".into()));
    }

    let panels = config.nodes.div_ceil(15).max(1);
    let mut offset = peak;
    for _ in 0..4 {
        let width = (hi - lo) / panels as f64;
        let mut heap = BinaryHeap::with_capacity(panels * 4);
        let mut seen = f64::NEG_INFINITY;
        for k in 0..panels {
            let a = lo + width * k as f64;
            let b = if k + 1 == panels { hi } else { a + width };
            let (panel, p) = gk15(&h, offset, a, b)?;
            seen = seen.max(p);
            heap.push(panel);
        }
        loop {
            let total: f64 = heap.iter().map(|p| p.value).sum();
            let error: f64 = heap.iter().map(|p| p.error).sum();
            if error <= REL_TOL * total.abs() || heap.len() >= MAX_PANELS {
                break;
            }
            let worst = heap.pop().expect("non-empty panel set");
            let mid = 0.5 * (worst.a + worst.b);
            let (left, p1) = gk15(&h, offset, worst.a, mid)?;
            let (right, p2) = gk15(&h, offset, mid, worst.b)?;
            seen = seen.max(p1).max(p2);
            heap.push(left);
            heap.push(right);
        }
        if seen > offset + 30.0 {
            // the scan missed the true peak; rescale so the panels do not overflow
            offset = seen;
            continue;
        }
        let total: f64 = heap.iter().map(|p| p.value).sum();
        if !(total > 0.0) {
            return Err(Error::Quadrature(format!("integral is {total}")));
        }
        return Ok(offset + total.ln());
    }
    Err(Error::Quadrature("integrand scale did not stabilise".into()))
}

fn to_theta(family: Family, v: f64) -> f64 {
    match family {
        Family::Gamma => -v.exp(),
        _ => v,
    }
}

fn log_jacobian(family: Family, v: f64) -> f64 {
    match family {
        Family::Gamma => v,
        _ => 0.0,
    }
}

/// Log of the unnormalized conjugate density on the integration scale.
fn log_prior_kernel(prior: &ConjugatePrior, v: f64) -> f64 {
    let family = prior.family();
    let theta = to_theta(family, v);
    match family.unit_cumulant(theta) {
        Ok(b) => prior.chi() * theta - prior.nu() * b + log_jacobian(family, v),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Mode of the conjugate density on the integration scale, used as a starting point.
fn prior_start(prior: &ConjugatePrior) -> f64 {
    let (chi, nu) = (prior.chi(), prior.nu());
    match prior.family() {
        Family::Gaussian => chi / nu,
        Family::Poisson => (chi / nu).ln(),
        Family::Binomial => {
            let m = (chi / nu).clamp(1e-12, 1.0 - 1e-12);
            (m / (1.0 - m)).ln()
        }
        Family::Gamma => ((nu + 1.0) / chi).ln(),
    }
}

/// Response log-density at mean `mu`, in the family's usual parameterization.
fn response_log_density(kernel: &FamilyKernel, y: f64, mu: f64) -> f64 {
    match *kernel {
        FamilyKernel::Gaussian { variance } => -0.5 * (2.0 * PI * variance).ln() - (y - mu).powi(2) / (2.0 * variance),
        FamilyKernel::Poisson => {
            let term = if y > 0.0 { y * mu.ln() } else { 0.0 };
            term - mu - lgamma(y + 1.0)
        }
        FamilyKernel::Binomial { trials } => {
            let n = f64::from(trials);
            let success = if y > 0.0 { y * mu.ln() } else { 0.0 };
            let failure = if n - y > 0.0 { (n - y) * (-mu).ln_1p() } else { 0.0 };
            ln_binomial(n, y) + success + failure
        }
        FamilyKernel::Gamma { shape } => {
            shape * (shape / mu).ln() + (shape - 1.0) * y.ln() - shape * y / mu - lgamma(shape)
        }
    }
}

fn data_log_likelihood(
    kernel: &FamilyKernel,
    transform: Option<&CovariateTransform>,
    group: &GroupView<'_>,
    mu0: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (j, &y) in group.y.iter().enumerate() {
        let k = group.kernel_for(kernel, j)?;
        let mu = match transform {
            Some(t) => t.mean_at(mu0, group.row(j)),
            None => mu0,
        };
        total += response_log_density(&k, y, mu);
    }
    Ok(total)
}

/// `log ∫ exp{χθ − ν b₁(θ)} dθ`, the numerically computed `−log g(χ, ν)`.
pub fn log_prior_integral(prior: &ConjugatePrior, config: &QuadratureConfig) -> Result<f64> {
    log_integrate(|v| log_prior_kernel(prior, v), prior_start(prior), config)
}

/// Marginal log-likelihood of one group by quadrature over its random effect.
pub fn quad_group_loglik(
    kernel: &FamilyKernel,
    prior: &ConjugatePrior,
    transform: Option<&CovariateTransform>,
    group: &GroupView<'_>,
    config: &QuadratureConfig,
) -> Result<f64> {
    for (j, &y) in group.y.iter().enumerate() {
        group.kernel_for(kernel, j)?.check_support(y)?;
    }
    let family = kernel.family();
    let integrand = |v: f64| {
        let theta = to_theta(family, v);
        let prior_part = log_prior_kernel(prior, v);
        if !prior_part.is_finite() {
            return prior_part;
        }
        match family.mean_of(theta) {
            Ok(mu0) => prior_part + data_log_likelihood(kernel, transform, group, mu0).unwrap_or(f64::NAN),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let numerator = log_integrate(integrand, prior_start(prior), config)?;
    Ok(numerator - log_prior_integral(prior, config)?)
}

/// Draw of the group's baseline mean μ₀ from the conjugate distribution.
fn draw_mean(prior: &ConjugatePrior, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (first, second) = prior.family_params();
    let bad = |e: String| Error::Quadrature(format!("cannot sample the random effect: {e}"));
    Ok(match prior.family() {
        Family::Gaussian => Normal::new(first, second.sqrt()).map_err(|e| bad(e.to_string()))?.sample(rng),
        Family::Poisson => Gamma::new(first, second).map_err(|e| bad(e.to_string()))?.sample(rng),
        Family::Binomial => Beta::new(first, second).map_err(|e| bad(e.to_string()))?.sample(rng),
        Family::Gamma => 1.0 / Gamma::new(first, 1.0 / second).map_err(|e| bad(e.to_string()))?.sample(rng),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    /// Delta-method standard error of the log-mean.
    pub std_error: f64,
}

/// Monte Carlo marginal log-likelihood: the log of the average conditional
/// likelihood over draws of the random effect.
pub fn mc_group_loglik(
    kernel: &FamilyKernel,
    prior: &ConjugatePrior,
    transform: Option<&CovariateTransform>,
    group: &GroupView<'_>,
    config: &QuadratureConfig,
) -> Result<McEstimate> {
    if config.mc_samples < 10_000 {
        return Err(Error::Quadrature(format!(
            "Monte Carlo needs at least 10000 draws, got {}",
            config.mc_samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logs = Vec::with_capacity(config.mc_samples);
    for _ in 0..config.mc_samples {
        let mu0 = draw_mean(prior, &mut rng)?;
        logs.push(data_log_likelihood(kernel, transform, group, mu0)?);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Quadrature("every Monte Carlo draw has zero likelihood".into()));
    }
    let m = logs.len() as f64;
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let mean = weights.iter().sum::<f64>() / m;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(McEstimate { estimate: log_sum_exp(&logs) - m.ln(), std_error: var.sqrt() / (m.sqrt() * mean) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub closed_form: f64,
    pub quadrature: f64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub closed_form: f64,
    pub quadrature: f64,
    /// `|closed − quad| / max(1, |quad|)` over the dataset total.
    pub total_discrepancy: f64,
    /// Largest per-group discrepancy on the same scale.
    pub max_discrepancy: f64,
    pub groups: Vec<GroupCheck>,
}

pub fn relative_discrepancy(closed: f64, reference: f64) -> f64 {
    (closed - reference).abs() / reference.abs().max(1.0)
}

/// Closed-form versus quadrature log-likelihood for every group of a bound model.
pub fn validate_model(bound: &BoundModel, natural: &[f64], config: &QuadratureConfig) -> Result<ValidationReport> {
    let closed = group_contributions(bound, natural)?;
    let kernel = bound.kernel(natural)?;
    let transform = bound.transform(natural)?;
    let ncols = bound.n_unit_covariates();
    let mut groups = Vec::with_capacity(closed.len());
    for (i, (group, &closed_form)) in bound.groups().iter().zip(&closed).enumerate() {
        let quadrature = if group.y.is_empty() {
            0.0
        } else {
            let prior = bound.group_prior(natural, i)?;
            quad_group_loglik(&kernel, &prior, transform.as_ref(), &group.view(ncols), config)?
        };
        groups.push(GroupCheck {
            group: group.id.clone(),
            closed_form,
            quadrature,
            discrepancy: relative_discrepancy(closed_form, quadrature),
        });
    }
    let closed_total: f64 = closed.iter().sum();
    let quad_total: f64 = groups.iter().map(|g| g.quadrature).sum();
    Ok(ValidationReport {
        closed_form: closed_total,
        quadrature: quad_total,
        total_discrepancy: relative_discrepancy(closed_total, quad_total),
        max_discrepancy: groups.iter().map(|g| g.discrepancy).fold(0.0, f64::max),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_rule_integrates_polynomials_exactly() {
        for k in 0..=22 {
            let h = |x: f64| if x > 0.0 { (k as f64) * x.ln() } else if k == 0 { 0.0 } else { f64::NEG_INFINITY };
            let (panel, _) = gk15(&h, 0.0, 0.0, 1.0).unwrap();
            assert!((panel.value - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "degree {k}");
        }
    }

    #[test]
    fn standard_normal_kernel_integrates_to_sqrt_two_pi() {
        let got = log_integrate(|v| -0.5 * v * v, 3.0, &QuadratureConfig::default()).unwrap();
        assert!((got - 0.5 * (2.0 * PI).ln()).abs() < 1e-13);
    }

    #[test]
    fn poisson_exponential_prior_zero_count() {
        let prior = ConjugatePrior::poisson(1.0, 1.0).unwrap();
        let y = [0.0];
        let got = quad_group_loglik(
            &FamilyKernel::poisson(),
            &prior,
            None,
            &GroupView::responses(&y),
            &QuadratureConfig::default(),
        )
        .unwrap();
        assert!((got + 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn node_count_is_validated() {
        let cfg = QuadratureConfig { nodes: 15, ..Default::default() };
        assert!(log_integrate(|v| -v * v, 0.0, &cfg).is_err());
    }

    #[test]
    fn monte_carlo_requires_enough_draws() {
        let prior = ConjugatePrior::poisson(1.0, 1.0).unwrap();
        let y = [0.0];
        let cfg = QuadratureConfig { mc_samples: 100, ..Default::default() };
        assert!(mc_group_loglik(&FamilyKernel::poisson(), &prior, None, &GroupView::responses(&y), &cfg).is_err());
    }
}
